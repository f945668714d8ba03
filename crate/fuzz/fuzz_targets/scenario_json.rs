#![no_main]

use libfuzzer_sys::fuzz_target;

use cits_sim::attack::Scenario;

fuzz_target!(|data: &[u8]| {
    let _ = Scenario::from_json_bytes(data);
});
