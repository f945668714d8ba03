#![no_main]

use libfuzzer_sys::fuzz_target;

use cits_sim::attack::VulnCatalog;

fuzz_target!(|data: &[u8]| {
    let _ = VulnCatalog::from_json_bytes(data);
});
