#![no_main]

use kfdiag::model::{parse_model, render_model};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = parse_model(text) {
        let again = parse_model(&render_model(&model)).expect("rendered model must parse");
        assert_eq!(again, model);
    }
});
