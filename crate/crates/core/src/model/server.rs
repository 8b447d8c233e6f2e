//! Protocol responder: exposes any [`Model`] over line-delimited stdio.
//!
//! Handy for wrapping a built-in model as an external one (`modcontrib serve`)
//! and for exercising the clients end to end.

use std::io::{BufRead, Write};

use super::protocol::{self, Hello, Request, PROTOCOL_VERSION};
use super::Model;
use crate::dataset::ModalityInput;

/// Answers requests until `input` closes. Only protocol lines go to `output`.
pub fn serve<R: BufRead, W: Write>(
    model: &dyn Model,
    names: &[String],
    batch: usize,
    input: R,
    mut output: W,
) -> std::io::Result<()> {
    let hello = Hello {
        version: PROTOCOL_VERSION.into(),
        output_dim: model.output_dim().unwrap_or(1),
        batch: batch.max(1),
        name: model.name(),
    };
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = respond(model, names, &hello, &line);
        writeln!(output, "{reply}")?;
        output.flush()?;
    }
    Ok(())
}

/// One reply line for one request line.
pub fn respond(model: &dyn Model, names: &[String], hello: &Hello, line: &str) -> String {
    match protocol::decode_request(line) {
        Ok(Request::Hello) => protocol::encode_hello(hello),
        Ok(Request::Predict { id, mut inputs }) => {
            let mut ordered: Vec<ModalityInput> = Vec::with_capacity(names.len());
            for name in names {
                match inputs.remove(name) {
                    Some(x) => ordered.push(x),
                    None => {
                        return protocol::encode_error(
                            Some(id),
                            &format!("missing modality {name:?}"),
                        )
                    }
                }
            }
            if let Some(extra) = inputs.keys().next() {
                return protocol::encode_error(Some(id), &format!("unknown modality {extra:?}"));
            }
            let refs: Vec<&ModalityInput> = ordered.iter().collect();
            match model.predict(&refs) {
                Ok(out) => protocol::encode_output(id, out.as_slice()),
                Err(e) => protocol::encode_error(Some(id), &e.to_string()),
            }
        }
        Err((id, message)) => {
            log::warn!("rejecting request: {message}");
            protocol::encode_error(id, &message)
        }
    }
}
