#![no_main]

use kfdiag::scenario::{read_scenario_csv, write_scenario_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(run) = read_scenario_csv(text) {
        let mut buf = Vec::new();
        write_scenario_csv(&run, &mut buf, None).expect("write to memory");
        let again = read_scenario_csv(std::str::from_utf8(&buf).unwrap()).expect("written run must parse");
        assert_eq!(again, run);
    }
});
