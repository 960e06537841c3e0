//! Checkpoint decoder: arbitrary bytes must never panic, and anything that
//! decodes must encode again.

#![no_main]

use agm_core::store::{from_bytes, to_bytes};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = from_bytes(data) {
        let bytes = to_bytes(&ckpt).expect("decoded checkpoint encodes");
        from_bytes(&bytes).expect("re-encoded checkpoint decodes");
    }
});
