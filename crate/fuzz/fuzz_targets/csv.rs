#![no_main]

use lgc::comms::RateLedger;
use lgc::trainer::MetricsSeries;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(l) = RateLedger::read_csv(data) {
        let text = l.to_csv_string().unwrap();
        assert_eq!(RateLedger::read_csv(text.as_bytes()).unwrap().to_csv_string().unwrap(), text);
    }
    if let Ok(m) = MetricsSeries::read_csv(data) {
        let _ = m.to_csv_string();
    }
});
