#![no_main]

use kfdiag::estimator::read_steps_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = read_steps_csv(text);
});
