#![no_main]

use fedcsd_core::diagnostics::{metrics_csv, parse_metrics_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(rows) = parse_metrics_csv(text) {
        let again = parse_metrics_csv(&metrics_csv(&rows)).expect("written metrics parse");
        assert_eq!(again.len(), rows.len());
    }
});
