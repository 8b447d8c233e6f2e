use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use super::protocol::{self, Hello};
use super::{check_batch_len, Inputs, Model, OutputVector};
use crate::dataset::ModalityInput;
use crate::error::{ModelError, Result};

struct Pipe {
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
}

/// External model reached over the child's stdin/stdout, one message per line.
///
/// Requests are serialized over the single pipe.
pub struct SubprocessModel {
    command: String,
    names: Vec<String>,
    hello: Hello,
    timeout: Duration,
    pipe: Mutex<Pipe>,
    child: Mutex<Child>,
}

impl SubprocessModel {
    /// Spawns `command` through `sh -c` and performs the handshake.
    pub fn spawn(command: &str, names: Vec<String>, timeout: Duration) -> Result<Self> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c").arg(command);
        Self::spawn_command(cmd, command.to_string(), names, timeout)
    }

    /// Like [`SubprocessModel::spawn`] with a prepared command (no shell).
    pub fn spawn_command(
        mut cmd: Command,
        label: String,
        names: Vec<String>,
        timeout: Duration,
    ) -> Result<Self> {
        let mut child = cmd
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ModelError::Transport(format!("cannot start {label:?}: {e}")))?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(stdout);
            loop {
                let mut line = String::new();
                match reader.read_line(&mut line) {
                    Ok(0) => break,
                    Ok(_) => {
                        if tx.send(Ok(line)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        break;
                    }
                }
            }
        });
        let mut pipe = Pipe {
            stdin: Some(stdin),
            lines: rx,
            next_id: 0,
        };
        let hello = match handshake(&mut pipe, timeout) {
            Ok(hello) => hello,
            Err(e) => {
                drop(pipe.stdin.take());
                let _ = child.kill();
                let _ = child.wait();
                return Err(e.into());
            }
        };
        log::info!(
            "connected to {:?} (protocol {}, C = {}, batch = {})",
            hello.name,
            hello.version,
            hello.output_dim,
            hello.batch
        );
        Ok(Self {
            command: label,
            names,
            hello,
            timeout,
            pipe: Mutex::new(pipe),
            child: Mutex::new(child),
        })
    }

    pub fn hello(&self) -> &Hello {
        &self.hello
    }

    fn roundtrip(&self, batch: &[Vec<&ModalityInput>]) -> Result<Vec<OutputVector>, ModelError> {
        let mut pipe = self.pipe.lock().expect("pipe lock");
        let first = pipe.next_id;
        let mut payload = String::new();
        for (offset, inputs) in batch.iter().enumerate() {
            payload.push_str(&protocol::encode_predict(
                first + offset as u64,
                &self.names,
                inputs,
            ));
            payload.push('\n');
        }
        pipe.next_id += batch.len() as u64;
        let stdin = pipe
            .stdin
            .as_mut()
            .expect("stdin open while model is alive");
        stdin
            .write_all(payload.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| ModelError::Transport(format!("write to model: {e}")))?;

        let deadline = Instant::now() + self.timeout * batch.len().max(1) as u32;
        let mut outputs: Vec<Option<OutputVector>> = vec![None; batch.len()];
        let mut failure: Option<ModelError> = None;
        for _ in 0..batch.len() {
            let line = read_line(&pipe.lines, deadline, self.timeout)?;
            let response = protocol::decode_response(line.trim_end())?;
            let id = response.id.ok_or_else(|| match &response.result {
                Err(message) => ModelError::Remote {
                    id: first,
                    message: message.clone(),
                },
                Ok(_) => ModelError::Malformed {
                    reason: "response without id".into(),
                    excerpt: protocol::excerpt(&line),
                },
            })?;
            let slot = id
                .checked_sub(first)
                .map(|s| s as usize)
                .filter(|&s| s < batch.len() && outputs[s].is_none())
                .ok_or_else(|| ModelError::Malformed {
                    reason: format!("unexpected response id {id}"),
                    excerpt: protocol::excerpt(&line),
                })?;
            let result = response
                .result
                .map_err(|message| ModelError::Remote { id, message })
                .and_then(|values| self.check_output(values));
            match result {
                Ok(out) => outputs[slot] = Some(out),
                Err(e) => {
                    // keep draining so the pipe stays aligned for the next call
                    failure.get_or_insert(ModelError::BatchElement {
                        index: slot,
                        source: Box::new(e),
                    });
                    outputs[slot] = Some(OutputVector(Vec::new()));
                }
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(outputs
            .into_iter()
            .map(|o| o.expect("every slot answered"))
            .collect())
    }

    fn check_output(&self, values: Vec<f64>) -> Result<OutputVector, ModelError> {
        if values.len() != self.hello.output_dim {
            return Err(ModelError::LengthDrift {
                expected: self.hello.output_dim,
                got: values.len(),
            });
        }
        OutputVector::new(values)
    }
}

fn read_line(
    lines: &Receiver<std::io::Result<String>>,
    deadline: Instant,
    timeout: Duration,
) -> Result<String, ModelError> {
    let wait = deadline.saturating_duration_since(Instant::now());
    match lines.recv_timeout(wait) {
        Ok(Ok(line)) => Ok(line),
        Ok(Err(e)) => Err(ModelError::Transport(format!("read from model: {e}"))),
        Err(RecvTimeoutError::Timeout) => Err(ModelError::Timeout(timeout)),
        Err(RecvTimeoutError::Disconnected) => {
            Err(ModelError::Transport("model closed its output".into()))
        }
    }
}

fn handshake(pipe: &mut Pipe, timeout: Duration) -> Result<Hello, ModelError> {
    let stdin = pipe.stdin.as_mut().expect("stdin open");
    writeln!(stdin, "{}", protocol::HELLO_REQUEST)
        .and_then(|_| stdin.flush())
        .map_err(|e| ModelError::Transport(format!("write hello: {e}")))?;
    let line = read_line(&pipe.lines, Instant::now() + timeout, timeout)?;
    protocol::parse_hello(line.trim_end())
}

impl Model for SubprocessModel {
    fn name(&self) -> String {
        format!("exec:{} ({})", self.command, self.hello.name)
    }

    fn output_dim(&self) -> Option<usize> {
        Some(self.hello.output_dim)
    }

    fn batch_limit(&self) -> usize {
        self.hello.batch
    }

    fn max_in_flight(&self) -> usize {
        1
    }

    fn is_external(&self) -> bool {
        true
    }

    fn predict(&self, inputs: &Inputs<'_>) -> Result<OutputVector, ModelError> {
        let mut out = self.roundtrip(&[inputs.to_vec()]).map_err(|e| match e {
            ModelError::BatchElement { source, .. } => *source,
            other => other,
        })?;
        Ok(out.pop().expect("one output"))
    }

    fn predict_batch(
        &self,
        batch: &[Vec<&ModalityInput>],
    ) -> Result<Vec<OutputVector>, ModelError> {
        check_batch_len(batch.len(), self.hello.batch)?;
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        self.roundtrip(batch)
    }
}

impl Drop for SubprocessModel {
    fn drop(&mut self) {
        // closing stdin asks the adapter to exit
        if let Ok(pipe) = self.pipe.get_mut() {
            drop(pipe.stdin.take());
        }
        let Ok(child) = self.child.get_mut() else {
            return;
        };
        let stop = Instant::now() + Duration::from_secs(2);
        while Instant::now() < stop {
            if let Ok(Some(_)) = child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = child.kill();
        let _ = child.wait();
    }
}
