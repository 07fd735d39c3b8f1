#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = coevo::io::parse_trainlog(text) {
            let _ = coevo::io::trainlog_csv(&records);
        }
    }
});
