#![no_main]

use libfuzzer_sys::fuzz_target;

use cits_sim::pdu::{decode_frame_bytes, IdTable};

fuzz_target!(|data: &[u8]| {
    // Decoding must be total: one of the four error kinds or a valid PDU,
    // never a panic.
    let table = IdTable::from_ids(["n0", "n1", "n2", "n3", "n4", "n5", "n6", "n7"]);
    let _ = decode_frame_bytes(data, &table);
});
