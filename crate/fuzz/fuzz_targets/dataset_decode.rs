#![no_main]

use fino::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(dataset) = Dataset::from_bytes(data) {
        let bytes = dataset.to_bytes();
        let again = Dataset::from_bytes(&bytes).expect("re-encoded dataset decodes");
        assert_eq!(again.len(), dataset.len());
        assert_eq!(again.to_bytes(), bytes);
    }
});
