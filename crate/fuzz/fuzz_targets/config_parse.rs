#![no_main]

use fino::pipeline::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(config) = RunConfig::parse(text) {
        let rendered = config.to_text();
        let again = RunConfig::parse(&rendered).expect("rendered config parses");
        assert_eq!(again.to_text(), rendered);
    }
});
