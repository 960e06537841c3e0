#![no_main]

use agm_core::agm::AgmConfig;
use agm_core::config::KeyValues;
use agm_core::egm::EgmConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = KeyValues::parse(data);
    if let Ok(cfg) = EgmConfig::from_text(data) {
        assert_eq!(EgmConfig::from_text(&cfg.to_text()).ok(), Some(cfg));
    }
    if let Ok(cfg) = AgmConfig::from_text(data) {
        assert_eq!(AgmConfig::from_text(&cfg.to_text()).ok(), Some(cfg));
    }
});
