#![no_main]

use libfuzzer_sys::fuzz_target;
use preq::doc::{parse_tensors, render_tensors};

fuzz_target!(|data: &[u8]| {
    if let Ok(ts) = parse_tensors(data) {
        let text = render_tensors(ts.iter().map(|(n, t)| (n.as_str(), t)));
        let back = parse_tensors(text.as_bytes()).expect("rendered tensors parse");
        assert_eq!(back, ts);
    }
});
