use serde_json::Value;

/// Returns the first complete JSON object or array in `text`, skipping code
/// fences and any prose around it.
pub fn extract_first_json(text: &str) -> Result<Value, String> {
    let mut last_err = String::from("no JSON object or array found");
    for (pos, c) in text.char_indices() {
        if c != '{' && c != '[' {
            continue;
        }
        let mut stream = serde_json::Deserializer::from_str(&text[pos..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(v)) => return Ok(v),
            Some(Err(e)) => last_err = e.to_string(),
            None => {}
        }
    }
    Err(last_err)
}
