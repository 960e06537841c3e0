#![no_main]

use agm_core::graph::GraphStructure;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(g) = GraphStructure::parse(data) {
        let again = GraphStructure::parse(&g.to_text()).expect("serialized structure reparses");
        assert_eq!(g, again);
    }
});
