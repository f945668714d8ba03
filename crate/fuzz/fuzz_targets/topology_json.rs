#![no_main]

use libfuzzer_sys::fuzz_target;

use cits_sim::topology::Topology;

fuzz_target!(|data: &[u8]| {
    let _ = Topology::from_json_bytes(data);
});
