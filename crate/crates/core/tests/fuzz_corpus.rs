//! Replays the checked-in fuzz corpus through each parser entry point so the
//! seeds keep exercising the decoders on stable toolchains.

use std::path::{Path, PathBuf};

use chrono::{TimeZone, Utc};
use epiqc_core::gate::parse_ratio;
use epiqc_core::ingest::{
    ingest, parse_count, parse_local_date, parse_payload, parse_source_registry, source_registry_to_toml,
};
use epiqc_core::journal::Journal;
use epiqc_core::{RegionTree, Store};

fn seeds(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<_> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let bytes = std::fs::read(&p).unwrap();
            (p, bytes)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

const REGIONS: &str = "code,name_en,name_local,level,parent,population
US,United States,,COUNTRY,,331000000
US-FL,Florida,,DIVISION,US,21480000
US-FL-091,Okaloosa,,SUBDIVISION,US-FL,210738
US-FL-086,Miami-Dade,,SUBDIVISION,US-FL,2717000
US-WA,Washington,,DIVISION,US,7615000
US-WA-033,King,,SUBDIVISION,US-WA,2253000
";

const CSV_SOURCES: &str = r#"
[[source]]
source_id = "snapshot"
scope_region = "US-FL"
paradigm = "SNAPSHOT"
format = "CSV"
poll_interval_minutes = 60
endpoint = "s.csv"
[source.field_map]
county = "region"
date = "date"
cases = "metric:confirmed"
deaths = "metric:deceased"

[[source]]
source_id = "cases"
scope_region = "US-FL"
paradigm = "PER_CASE"
format = "CSV"
poll_interval_minutes = 60
endpoint = "c.csv"
[source.field_map]
county = "region"
reported = "date"
cluster = "cluster_size"
link = "source_refs"
"#;

const JSON_SOURCES: &str = r#"
[[source]]
source_id = "history"
scope_region = "US-WA"
paradigm = "FULL_HISTORY"
format = "JSON"
poll_interval_minutes = 60
endpoint = "h.json"
json_pointer = "/rows"
[source.field_map]
county = "region"
day = "date"
confirmed = "metric:confirmed"

[[source]]
source_id = "snapshot"
scope_region = "US-WA"
paradigm = "SNAPSHOT"
format = "JSON"
poll_interval_minutes = 60
endpoint = "s.json"
[source.field_map]
county = "region"
day = "date"
confirmed = "metric:confirmed"
"#;

/// Returns how many seeds parsed.
fn replay_payloads(target: &str, sources: &str) -> usize {
    let mut regions = RegionTree::new();
    regions.load_csv(REGIONS.as_bytes()).unwrap();
    let sources = parse_source_registry(sources).unwrap();
    let fetched_at = Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap();
    let mut parsed = 0;
    for (path, data) in seeds(target) {
        let Some((&selector, raw)) = data.split_first() else { continue };
        let descriptor = &sources[(selector % 2) as usize];
        if let Ok(batch) = parse_payload(raw, descriptor, &regions, fetched_at) {
            parsed += 1;
            for obs in &batch.observations {
                assert!(regions.contains(obs.region_id()), "{}", path.display());
            }
            let _ = ingest(&batch, descriptor, &Store::new(regions.clone()));
        }
    }
    parsed
}

#[test]
fn csv_payload_seeds() {
    assert!(replay_payloads("payload_csv", CSV_SOURCES) >= 3);
}

#[test]
fn json_payload_seeds() {
    assert!(replay_payloads("payload_json", JSON_SOURCES) >= 2);
}

#[test]
fn region_registry_seeds() {
    let mut loaded = 0;
    for (_, data) in seeds("region_registry") {
        let mut tree = RegionTree::new();
        if tree.load_csv(data.as_slice()).is_ok() {
            loaded += 1;
            for region in tree.iter() {
                if let Some(parent) = &region.parent_id {
                    assert!(tree.contains(parent));
                }
            }
        }
    }
    assert!(loaded >= 2);
}

#[test]
fn source_registry_seeds() {
    let mut parsed = 0;
    for (path, data) in seeds("source_registry") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(sources) = parse_source_registry(text) {
            parsed += 1;
            let again = parse_source_registry(&source_registry_to_toml(&sources)).unwrap();
            assert_eq!(sources, again, "{}", path.display());
        }
    }
    assert!(parsed >= 1);
}

#[test]
fn scalar_seeds() {
    for (_, data) in seeds("scalars") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        let _ = parse_local_date(text, chrono_tz::America::New_York);
        if let Some(n) = parse_count(text) {
            assert_eq!(parse_count(&n.to_string()), Some(n));
        }
        if let Ok(r) = parse_ratio(text) {
            assert_eq!(parse_ratio(&format!("{}/{}", r.numer(), r.denom())), Ok(r));
        }
    }
}

#[test]
fn journal_seeds() {
    let mut parsed = 0;
    for (path, data) in seeds("journal") {
        let Ok(text) = std::str::from_utf8(&data) else { continue };
        if let Ok(journal) = Journal::from_jsonl(text) {
            parsed += journal.len();
            assert_eq!(Journal::from_jsonl(&journal.to_jsonl()).unwrap(), journal, "{}", path.display());
        }
    }
    assert!(parsed > 0);
}
