#![no_main]

use fino::nn::DenseNet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(net) = DenseNet::from_bytes(data) {
        // Accepted input must survive a re-encode bit for bit.
        let bytes = net.to_bytes();
        assert_eq!(bytes.as_slice(), data);
        let again = DenseNet::from_bytes(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(again.to_bytes(), bytes);
    }
});
