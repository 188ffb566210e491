#![no_main]

use fino::envs::MazeLayout;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let text = String::from_utf8_lossy(data);
    if let Ok(layout) = MazeLayout::parse(&text) {
        let again = MazeLayout::parse(&layout.to_string()).expect("rendered layout parses");
        assert_eq!(again, layout);
    }
});
