#![no_main]

use agm_core::data::parse_pgm;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_pgm(data);
});
