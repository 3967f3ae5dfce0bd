#![no_main]

use libfuzzer_sys::fuzz_target;
use preq::graphir::{parse, validate};
use preq::patterns::{build_model, extract, GraphInput};

fuzz_target!(|data: &[u8]| {
    let Ok(g) = parse(data) else { return };
    let _ = validate(&g);
    if let Ok(layers) = extract(&g) {
        let input = &g.inputs[0];
        if let Some(shape) = input.fixed_shape() {
            let gi = GraphInput { name: input.name.clone(), shape };
            if let Ok(rebuilt) = build_model(&layers, &gi) {
                assert_eq!(extract(&rebuilt).expect("rebuilt graph extracts"), layers);
            }
        }
    }
});
