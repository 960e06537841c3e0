#![no_main]

use agm_core::data::Dataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(d) = Dataset::parse(data) {
        let again = Dataset::parse(&d.to_text()).expect("serialized dataset reparses");
        assert_eq!(again.n_points(), d.n_points());
        assert_eq!(again.n_vars(), d.n_vars());
    }
});
