#![no_main]

use ccrp_core::Scenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(s) = Scenario::parse(text) {
        assert_eq!(Scenario::parse(&s.to_text()).ok(), Some(s.clone()));
        // schedules must never panic on a validated scenario
        if s.validate().is_ok() {
            let _ = s.schedules(s.horizon());
        }
    }
});
