#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(geom) = dinr::tomo::io::geometry_from_text(text) {
            // Accepted geometries must satisfy their own invariants.
            assert!(geom.n_views() > 0);
            assert!(geom.detector_spacing > 0.0);
        }
    }
});
