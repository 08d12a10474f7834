#![no_main]

use std::fs;

use libfuzzer_sys::fuzz_target;
use simstage::pipeline::Manifest;
use tempfile::tempdir;

fuzz_target!(|data: &[u8]| {
    let Ok(td) = tempdir() else {
        return;
    };
    let path = td.path().join("manifest.json");
    if fs::write(&path, data).is_ok() {
        let _ = Manifest::load(&path);
    }
});
