#![no_main]

use kfdiag::diagnosis::read_verdicts_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = read_verdicts_csv(text);
});
