#![no_main]
use libfuzzer_sys::fuzz_target;
use mforecast_core::tokenizer::Tokenizer;

fuzz_target!(|data: &[u8]| {
    // first line is the text to encode, the rest is the tokenizer file
    let split = data.iter().position(|&b| b == b'\n').unwrap_or(data.len());
    let (text, json) = data.split_at(split);
    if let (Ok(tok), Ok(text)) = (Tokenizer::from_json(json.get(1..).unwrap_or(&[])), std::str::from_utf8(text)) {
        let _ = tok.encode(text);
    }
});
