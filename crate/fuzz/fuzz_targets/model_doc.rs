#![no_main]

use libfuzzer_sys::fuzz_target;
use preq::doc::{parse_model, parse_profile};

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_model(data) {
        let _ = m.check();
    }
    let _ = parse_profile(data);
});
