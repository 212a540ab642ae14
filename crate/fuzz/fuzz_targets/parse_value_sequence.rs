#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|input: &str| {
    for value in dualprompt::prompts::parse_value_sequence(input) {
        assert!(!value.is_empty());
        assert_eq!(value.trim(), value);
    }
});
