//! The observations CSV parser must never panic on arbitrary input.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(obs) = odecop::csvio::parse_observations(text, 0.4) {
        // a successful parse must satisfy the shape invariants
        assert!(obs.validate().is_ok());
        let _ = odecop::csvio::observations_to_csv(&obs);
    }
});
