#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::sysid::VelocityModel;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(m) = VelocityModel::from_json_str(s) {
            let back = VelocityModel::from_json_str(&m.to_json_string()).expect("round trip");
            assert_eq!(back, m);
        }
    }
});
