#![no_main]

use ddm_core::nn;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok((net, opt, role)) = nn::checkpoint_from_bytes(data, None) {
        let bytes = nn::checkpoint_bytes(&net, &opt, &role);
        assert!(nn::checkpoint_from_bytes(&bytes, Some(&net.widths())).is_ok());
    }
});
