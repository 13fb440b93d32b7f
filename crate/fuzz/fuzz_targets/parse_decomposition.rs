#![no_main]

use kfdiag::decomposition::{parse_decomposition, render_decomposition};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(dec) = parse_decomposition(text) {
        if let Ok(again) = parse_decomposition(&render_decomposition(&dec)) {
            assert_eq!(again.n1, dec.n1);
        }
    }
});
