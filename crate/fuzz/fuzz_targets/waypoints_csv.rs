#![no_main]

use libfuzzer_sys::fuzz_target;
use simstage::dynamics::RobotState;
use simstage::pathfollow::{waypoints_from_csv_reader, Path};

fuzz_target!(|data: &[u8]| {
    let Ok(wps) = waypoints_from_csv_reader(data) else {
        return;
    };
    // Keep synthesized paths small; huge coordinates are legal but slow.
    if wps.iter().all(|w| w.x.abs() < 1e3 && w.y.abs() < 1e3) && wps.len() < 64 {
        let _ = Path::through_waypoints(&RobotState::default(), &wps, 0.05);
    }
});
