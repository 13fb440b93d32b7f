#![no_main]

use kfdiag::scenario::read_measurements_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&first, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let m = 1 + usize::from(first % 16);
    if let Ok(z) = read_measurements_csv(text, m) {
        assert_eq!(z.ncols(), m);
        assert!(z.iter().all(|v| v.is_finite()));
    }
});
