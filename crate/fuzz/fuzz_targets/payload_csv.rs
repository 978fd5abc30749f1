#![no_main]

use chrono::{TimeZone, Utc};
use epiqc_core::ingest::{ingest, parse_payload, parse_source_registry};
use epiqc_core::{RegionTree, Store};
use libfuzzer_sys::fuzz_target;

const REGIONS: &str = "code,name_en,name_local,level,parent,population
US,United States,,COUNTRY,,331000000
US-FL,Florida,,DIVISION,US,21480000
US-FL-091,Okaloosa,,SUBDIVISION,US-FL,210738
US-FL-086,Miami-Dade,,SUBDIVISION,US-FL,2717000
";

const SOURCES: &str = r#"
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

fuzz_target!(|data: &[u8]| {
    let Some((&selector, raw)) = data.split_first() else { return };
    let mut regions = RegionTree::new();
    regions.load_csv(REGIONS.as_bytes()).unwrap();
    let sources = parse_source_registry(SOURCES).unwrap();
    let descriptor = &sources[(selector % 2) as usize];
    let fetched_at = Utc.with_ymd_and_hms(2020, 4, 15, 12, 0, 0).unwrap();
    if let Ok(batch) = parse_payload(raw, descriptor, &regions, fetched_at) {
        for obs in &batch.observations {
            assert!(regions.contains(obs.region_id()));
        }
        let store = Store::new(regions);
        let _ = ingest(&batch, descriptor, &store);
    }
});
