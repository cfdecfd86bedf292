#![no_main]

use ccrp_core::RunReport;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = RunReport::parse_records(text) {
        assert_eq!(
            RunReport::parse_records(&report.records()),
            Ok(report.clone())
        );
        let _ = report.table();
    }
});
