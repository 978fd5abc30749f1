#![no_main]

use epiqc_core::RegionTree;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let mut tree = RegionTree::new();
    if tree.load_csv(data).is_ok() {
        // Every loaded region must be reachable from its own ancestor chain.
        for region in tree.iter() {
            if let Some(parent) = &region.parent_id {
                assert!(tree.contains(parent));
            }
        }
    }
});
