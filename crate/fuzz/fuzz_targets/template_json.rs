#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: &str| {
    let _ = dualprompt::prompts::TemplateSet::from_json(input);
});
