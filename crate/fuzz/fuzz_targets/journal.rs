#![no_main]

use epiqc_core::journal::Journal;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(journal) = Journal::from_jsonl(text) {
        assert_eq!(Journal::from_jsonl(&journal.to_jsonl()).unwrap(), journal);
    }
});
