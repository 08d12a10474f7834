#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::nn::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(c) = Checkpoint::from_json_str(s) {
        let back = Checkpoint::from_json_str(&c.to_json_string()).expect("round trip");
        assert_eq!(back.params, c.params);
        assert_eq!(back.step, c.step);
    }
});
