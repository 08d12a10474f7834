#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::dynamics::{Env, EnvConfig};
use simstage::sysid::VelocityModel;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = EnvConfig::from_json_str(s) {
        // A validated config must build an environment.
        Env::new(cfg, VelocityModel::reference_asymmetric()).expect("validated config");
    }
});
