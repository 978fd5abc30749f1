#![no_main]

use epiqc_core::gate::parse_ratio;
use epiqc_core::ingest::{parse_count, parse_local_date};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_local_date(text, chrono_tz::America::New_York);
    if let Some(n) = parse_count(text) {
        assert_eq!(parse_count(&n.to_string()), Some(n));
    }
    if let Ok(r) = parse_ratio(text) {
        assert_eq!(parse_ratio(&format!("{}/{}", r.numer(), r.denom())), Ok(r));
    }
});
