#![no_main]

use libfuzzer_sys::fuzz_target;
use listcycle::checkpoint::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let _ = Checkpoint::from_bytes(data);
});
