#![no_main]

use epiqc_core::ingest::{parse_source_registry, source_registry_to_toml};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(sources) = parse_source_registry(text) {
        let again = parse_source_registry(&source_registry_to_toml(&sources)).expect("re-parse");
        assert_eq!(sources, again);
    }
});
