#![no_main]

use ccrp_core::metering::{encode_line, parse_line};
use ccrp_core::{MeterLog, Party};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    for line in text.lines() {
        if let Ok(rec) = parse_line(line) {
            assert_eq!(parse_line(&encode_line(&rec)), Ok(rec));
        }
    }
    for party in [Party::Consumer, Party::Provider] {
        if let Ok(log) = MeterLog::parse(party, text) {
            let again = MeterLog::parse(party, &log.to_text()).expect("re-encoded log parses");
            assert_eq!(log.entries(), again.entries());
        }
    }
});
