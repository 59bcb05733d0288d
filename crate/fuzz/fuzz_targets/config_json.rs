#![no_main]

use libfuzzer_sys::fuzz_target;
use listcycle::config::RunConfig;
use listcycle::scenes::Manifest;

fuzz_target!(|data: &[u8]| {
    let _ = RunConfig::from_json(data);
    let _ = Manifest::from_json(data);
});
