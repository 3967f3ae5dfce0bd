#![no_main]

use libfuzzer_sys::fuzz_target;
use preq::graphir::{parse, serialize, validate, Severity};

fuzz_target!(|data: &[u8]| {
    let Ok(g) = parse(data) else { return };
    let clean = validate(&g).iter().all(|d| d.severity != Severity::Error);
    match serialize(&g) {
        Ok(bytes) => {
            assert!(clean);
            assert_eq!(parse(&bytes).expect("reparse"), g);
        }
        Err(_) => assert!(!clean),
    }
});
