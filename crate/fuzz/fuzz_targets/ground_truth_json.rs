#![no_main]

use libfuzzer_sys::fuzz_target;
use listcycle::scenes::GroundTruthRecord;

fuzz_target!(|data: &[u8]| {
    let _ = GroundTruthRecord::from_json(data);
});
