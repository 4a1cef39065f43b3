#![no_main]

use ddm_core::datagen::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // Dataset caches and sample files share this decoder.
    if let Ok((ds, _)) = Dataset::from_bytes(data) {
        let (back, _) = Dataset::from_bytes(&ds.to_bytes()).expect("re-encoded dataset decodes");
        assert_eq!(back.len(), ds.len());
    }
});
