#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::sysid::{fit, IdentificationDataset};

fuzz_target!(|data: &[u8]| {
    let Ok(ds) = IdentificationDataset::from_csv_reader(data) else {
        return;
    };
    // Whatever parses must survive a write/read cycle and a fit attempt.
    let again = IdentificationDataset::from_csv_str(&ds.to_csv_string()).expect("re-parse");
    assert_eq!(again.samples.len(), ds.samples.len());
    if ds.samples.len() <= 4096 {
        let _ = fit(&ds);
    }
});
