//! The config parser must reject arbitrary input with an error, never a
//! panic; when parsing succeeds, the typed accessors and the custom
//! problem builder must also be panic-free.

#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(cfg) = odecop::config::parse_config(text) else {
        return;
    };
    let _ = cfg.get_f64("h");
    let _ = cfg.get_usize("nu");
    let _ = cfg.get_u64("seed");
    let _ = cfg.check_known(&["h", "nu", "seed", "dist", "problem.*"]);
    if let Some(d) = cfg.get("dist") {
        let _ = odecop::config::parse_distribution(d);
    }
    let _ = odecop::config::build_custom_problem(&cfg);
});
