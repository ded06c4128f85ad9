#![no_main]

use libfuzzer_sys::fuzz_target;

// Drives both the line parser and the typed schema extraction.
fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(doc) = dinr::config::parse_config_str(text, "fuzz.ini") {
            let _ = dinr::config::ExperimentSpec::from_doc(doc);
        }
    }
});
