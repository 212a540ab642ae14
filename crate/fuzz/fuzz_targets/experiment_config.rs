#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: &str| {
    let _ = dualprompt::cli::pipeline::ExperimentConfig::from_json(input);
});
