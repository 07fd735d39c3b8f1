#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(records) = coevo::io::parse_verdicts(text) {
            let _ = coevo::io::group_verdicts(&records);
        }
    }
});
