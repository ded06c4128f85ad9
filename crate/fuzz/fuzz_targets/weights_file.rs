#![no_main]

use libfuzzer_sys::fuzz_target;

// Every reader of the weight container: the raw ParamSet layer and the two
// header-bearing model formats. Arbitrary bytes must produce an error, never
// a panic or runaway allocation.
fuzz_target!(|data: &[u8]| {
    let _ = dinr::nnkit::io::read_params_bytes(data);
    let _ = dinr::diffusion::load_denoiser_bytes(data);
    let _ = dinr::inr::load_inr_bytes(data);
});
