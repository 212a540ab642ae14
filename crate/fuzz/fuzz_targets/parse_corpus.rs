#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: &str| {
    if let Ok(corpus) = dualprompt::corpus::parse_corpus(input) {
        for conv in &corpus {
            for t in 0..conv.turns.len() {
                let _ = dualprompt::corpus::dialogue_history(conv, t, Some(64));
            }
        }
    }
});
