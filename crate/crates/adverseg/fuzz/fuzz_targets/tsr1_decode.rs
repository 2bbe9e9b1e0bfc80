#![no_main]

use libfuzzer_sys::fuzz_target;

// decode_tsr must return an error, never panic, on arbitrary bytes
fuzz_target!(|data: &[u8]| {
    let _ = adverseg::data::decode_tsr(data);
});
