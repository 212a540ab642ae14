#![no_main]

use dualprompt::lm::{decode_checkpoint, encode_checkpoint};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&model).expect("re-encode");
        let again = decode_checkpoint(&bytes).expect("decode re-encoded");
        assert_eq!(encode_checkpoint(&again).expect("re-encode"), bytes);
    }
});
