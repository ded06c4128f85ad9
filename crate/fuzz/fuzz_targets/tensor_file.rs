#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(tensor) = dinr::tomo::io::read_tensor_bytes(data) {
        // Accepted payloads must satisfy the tensor invariant.
        assert_eq!(tensor.shape().iter().product::<usize>(), tensor.len());
    }
});
