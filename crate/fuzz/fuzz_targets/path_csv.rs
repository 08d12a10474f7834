#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::pathfollow::{undersample, Path};

fuzz_target!(|data: &[u8]| {
    if let Ok(path) = Path::from_csv_reader(data) {
        let _ = Path::from_csv_str(&path.to_csv_string()).expect("re-parse");
        if let Ok(plan) = undersample(&path, 1.0) {
            assert!(!plan.goals.is_empty());
        }
    }
});
