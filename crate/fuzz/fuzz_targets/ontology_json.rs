#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: &str| {
    let _ = dualprompt::corpus::Ontology::from_json(input);
});
