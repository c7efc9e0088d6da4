//! Lock-step binary protocol for backbones living in another process.
//!
//! Every frame is `magic[4] | opcode: u32 LE | payload length: u64 LE |
//! payload`. Tensors are little-endian `f32`, row-major, channel-last.
//!
//! | opcode | direction | payload |
//! |---|---|---|
//! | `HELLO` | both | `h, w, c, caps` as `u32` |
//! | `FWD` | → | `x` |
//! | `NORMALS` | ← | `n` (`h·w·3`) |
//! | `VJP` | → | `x ‖ cotangent` |
//! | `GRAD` | ← | `g` (`h·w·c`) |
//! | `JVP` | → | `x ‖ tangent` |
//! | `OUT` | ← | `t` (`h·w·3`) |
//! | `BYE` | both | empty |
//! | `ERROR` | ← | UTF-8 message |

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::thread;
use std::time::Duration;

use super::{check_field, check_input, Backbone, BackboneError, Capabilities, InputSpec};
use crate::grid::{Image, NormalMap, Shape, VectorField};

pub const MAGIC: [u8; 4] = *b"PGB1";
/// Payloads above this size are rejected as malformed.
pub const MAX_PAYLOAD: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Opcode {
    Hello = 1,
    Fwd = 2,
    Normals = 3,
    Vjp = 4,
    Grad = 5,
    Jvp = 6,
    Out = 7,
    Bye = 8,
    Error = 0xFF,
}

impl Opcode {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            1 => Opcode::Hello,
            2 => Opcode::Fwd,
            3 => Opcode::Normals,
            4 => Opcode::Vjp,
            5 => Opcode::Grad,
            6 => Opcode::Jvp,
            7 => Opcode::Out,
            8 => Opcode::Bye,
            0xFF => Opcode::Error,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub op: Opcode,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(op: Opcode, payload: Vec<u8>) -> Self {
        Self { op, payload }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&(self.op as u32).to_le_bytes());
        out.extend_from_slice(&(self.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<()> {
    w.write_all(&frame.encode())?;
    w.flush()
}

/// Reads one frame. `Ok(None)` on a clean end of stream before any header byte.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, BackboneError> {
    let mut header = [0u8; 16];
    let mut got = 0;
    while got < header.len() {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(BackboneError::Protocol("truncated header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(BackboneError::Transport(e.to_string())),
        }
    }
    if header[..4] != MAGIC {
        return Err(BackboneError::Protocol(format!(
            "bad magic {:?}",
            &header[..4]
        )));
    }
    let code = u32::from_le_bytes(header[4..8].try_into().expect("4 bytes"));
    let op = Opcode::from_u32(code)
        .ok_or_else(|| BackboneError::Protocol(format!("unknown opcode {code:#x}")))?;
    let len = u64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
    if len > MAX_PAYLOAD {
        return Err(BackboneError::Protocol(format!("payload of {len} bytes")));
    }
    let mut payload = vec![0u8; len as usize];
    r.read_exact(&mut payload)
        .map_err(|_| BackboneError::Protocol("truncated payload".into()))?;
    Ok(Some(Frame { op, payload }))
}

pub fn encode_f32(values: impl IntoIterator<Item = f64>, out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn decode_f32(bytes: &[u8]) -> Result<Vec<f64>, BackboneError> {
    if !bytes.len().is_multiple_of(4) {
        return Err(BackboneError::Protocol(format!(
            "tensor payload of {} bytes",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
        .collect())
}

fn hello_payload(spec: InputSpec, caps: u32) -> Vec<u8> {
    [
        spec.height as u32,
        spec.width as u32,
        spec.channels as u32,
        caps,
    ]
    .iter()
    .flat_map(|v| v.to_le_bytes())
    .collect()
}

fn parse_hello(payload: &[u8]) -> Result<(InputSpec, u32), BackboneError> {
    if payload.len() != 16 {
        return Err(BackboneError::Protocol(
            "HELLO payload must be 16 bytes".into(),
        ));
    }
    let f = |i: usize| u32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    Ok((
        Shape::new(f(0) as usize, f(1) as usize, f(2) as usize),
        f(3),
    ))
}

fn field_values(v: &VectorField) -> impl Iterator<Item = f64> + '_ {
    v.data().iter().flat_map(|p| p.iter().copied())
}

fn to_field(spec: InputSpec, values: Vec<f64>) -> Result<VectorField, BackboneError> {
    if values.len() != spec.pixels() * 3 {
        return Err(BackboneError::Protocol(format!(
            "expected {} normal components, got {}",
            spec.pixels() * 3,
            values.len()
        )));
    }
    let data = values.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(VectorField::from_vec(spec.height, spec.width, data).expect("sized"))
}

fn to_image(spec: InputSpec, values: Vec<f64>) -> Result<Image, BackboneError> {
    Image::from_vec(spec.height, spec.width, spec.channels, values)
        .map_err(|e| BackboneError::Protocol(e.to_string()))
}

/// Answers protocol requests with `backbone` until `BYE` or end of stream.
///
/// A malformed frame is answered with `ERROR` and ends the loop with an error.
/// Backbone failures and shape mismatches are reported with `ERROR` and the
/// loop continues.
pub fn serve<B, R, W>(backbone: &mut B, reader: R, writer: W) -> Result<(), BackboneError>
where
    B: Backbone + ?Sized,
    R: Read,
    W: Write,
{
    let mut reader = BufReader::new(reader);
    let mut writer = BufWriter::new(writer);
    let spec = backbone.spec();
    let tensor = spec.len() * 4;
    let send = |w: &mut BufWriter<W>, f: Frame| {
        write_frame(w, &f).map_err(|e| BackboneError::Transport(e.to_string()))
    };
    let error = |msg: String| Frame::new(Opcode::Error, msg.into_bytes());
    loop {
        let frame = match read_frame(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return Ok(()),
            Err(e) => {
                send(&mut writer, error(e.to_string()))?;
                return Err(e);
            }
        };
        let reply = match frame.op {
            Opcode::Hello => match parse_hello(&frame.payload) {
                Ok((asked, _)) if asked == spec => Frame::new(
                    Opcode::Hello,
                    hello_payload(spec, backbone.caps().to_bits()),
                ),
                Ok((asked, _)) => {
                    error(format!("backbone expects {spec}, client asked for {asked}"))
                }
                Err(e) => error(e.to_string()),
            },
            Opcode::Fwd => {
                let res = decode_f32(&frame.payload)
                    .and_then(|v| to_image(spec, v))
                    .and_then(|x| backbone.forward(&x));
                match res {
                    Ok(n) => {
                        let mut p = Vec::new();
                        encode_f32(field_values(&n), &mut p);
                        Frame::new(Opcode::Normals, p)
                    }
                    Err(e) => error(e.to_string()),
                }
            }
            Opcode::Vjp | Opcode::Jvp if frame.payload.len() < tensor => error(format!(
                "payload of {} bytes is too short",
                frame.payload.len()
            )),
            Opcode::Vjp => {
                let (a, b) = frame.payload.split_at(tensor);
                let res = (|| {
                    let x = to_image(spec, decode_f32(a)?)?;
                    let g = to_field(spec, decode_f32(b)?)?;
                    backbone.vjp_input(&x, &g)
                })();
                match res {
                    Ok(g) => {
                        let mut p = Vec::new();
                        encode_f32(g.data().iter().copied(), &mut p);
                        Frame::new(Opcode::Grad, p)
                    }
                    Err(e) => error(e.to_string()),
                }
            }
            Opcode::Jvp => {
                let (a, b) = frame.payload.split_at(tensor);
                let res = (|| {
                    let x = to_image(spec, decode_f32(a)?)?;
                    let t = to_image(spec, decode_f32(b)?)?;
                    backbone.jvp_input(&x, &t)
                })();
                match res {
                    Ok(t) => {
                        let mut p = Vec::new();
                        encode_f32(field_values(&t), &mut p);
                        Frame::new(Opcode::Out, p)
                    }
                    Err(e) => error(e.to_string()),
                }
            }
            Opcode::Bye => {
                send(&mut writer, Frame::new(Opcode::Bye, Vec::new()))?;
                return Ok(());
            }
            other => {
                let e = BackboneError::Protocol(format!("unexpected {other:?} request"));
                send(&mut writer, error(e.to_string()))?;
                return Err(e);
            }
        };
        send(&mut writer, reply)?;
    }
}

/// Client side of the protocol.
pub struct BridgeClient {
    spec: InputSpec,
    caps: Capabilities,
    writer: Box<dyn Write + Send>,
    frames: Receiver<Result<Frame, BackboneError>>,
    timeout: Duration,
    child: Option<Child>,
    broken: bool,
}

impl BridgeClient {
    pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

    /// Spawns `sh -c command` and handshakes over its stdin/stdout.
    pub fn spawn(command: &str, spec: InputSpec, timeout: Duration) -> Result<Self, BackboneError> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackboneError::Transport(format!("cannot start `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped");
        let stdout = child.stdout.take().expect("piped");
        let mut client = Self::connect(stdout, stdin, spec, timeout);
        if let Ok(c) = &mut client {
            c.child = Some(child);
        } else {
            let _ = child.kill();
            let _ = child.wait();
        }
        client
    }

    /// Handshakes over an existing pair of streams.
    pub fn connect<R, W>(
        reader: R,
        writer: W,
        spec: InputSpec,
        timeout: Duration,
    ) -> Result<Self, BackboneError>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let mut reader = BufReader::new(reader);
            loop {
                let msg = match read_frame(&mut reader) {
                    Ok(Some(f)) => Ok(f),
                    Ok(None) => Err(BackboneError::Transport("bridge closed its output".into())),
                    Err(e) => Err(e),
                };
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    break;
                }
            }
        });
        let mut client = Self {
            spec,
            caps: Capabilities::from_bits(0),
            writer: Box::new(BufWriter::new(writer)),
            frames: rx,
            timeout,
            child: None,
            broken: false,
        };
        let reply = client.request(
            Frame::new(Opcode::Hello, hello_payload(spec, 0)),
            Opcode::Hello,
        )?;
        let (got, caps) = parse_hello(&reply)?;
        if got != spec {
            return Err(BackboneError::Protocol(format!(
                "bridge answered HELLO for {got}, asked for {spec}"
            )));
        }
        client.caps = Capabilities::from_bits(caps);
        Ok(client)
    }

    fn request(&mut self, frame: Frame, expect: Opcode) -> Result<Vec<u8>, BackboneError> {
        if self.broken {
            return Err(BackboneError::Transport("bridge session is closed".into()));
        }
        let res = self.exchange(frame, expect);
        if matches!(
            res,
            Err(BackboneError::Transport(_)
                | BackboneError::Timeout(_)
                | BackboneError::Protocol(_))
        ) {
            self.broken = true;
        }
        res
    }

    fn exchange(&mut self, frame: Frame, expect: Opcode) -> Result<Vec<u8>, BackboneError> {
        write_frame(&mut self.writer, &frame)
            .map_err(|e| BackboneError::Transport(e.to_string()))?;
        let reply = match self.frames.recv_timeout(self.timeout) {
            Ok(r) => r?,
            Err(RecvTimeoutError::Timeout) => return Err(BackboneError::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(BackboneError::Transport("bridge reader stopped".into()))
            }
        };
        match reply.op {
            op if op == expect => Ok(reply.payload),
            Opcode::Error => Err(BackboneError::Remote(
                String::from_utf8_lossy(&reply.payload).into_owned(),
            )),
            op => Err(BackboneError::Protocol(format!(
                "expected {expect:?}, got {op:?}"
            ))),
        }
    }

    /// Sends `BYE` and waits for the child, if any.
    pub fn close(mut self) -> Result<(), BackboneError> {
        self.shutdown()
    }

    fn shutdown(&mut self) -> Result<(), BackboneError> {
        let res = if self.broken {
            Ok(())
        } else {
            self.broken = true;
            self.exchange(Frame::new(Opcode::Bye, Vec::new()), Opcode::Bye)
                .map(|_| ())
        };
        if let Some(mut child) = self.child.take() {
            if res.is_err() {
                let _ = child.kill();
            }
            let _ = child.wait();
        }
        res
    }
}

impl Drop for BridgeClient {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

impl Backbone for BridgeClient {
    fn spec(&self) -> InputSpec {
        self.spec
    }

    fn caps(&self) -> Capabilities {
        self.caps
    }

    fn forward(&mut self, x: &Image) -> Result<NormalMap, BackboneError> {
        check_input(self.spec, x)?;
        let mut p = Vec::with_capacity(x.data().len() * 4);
        encode_f32(x.data().iter().copied(), &mut p);
        let reply = self.request(Frame::new(Opcode::Fwd, p), Opcode::Normals)?;
        to_field(self.spec, decode_f32(&reply)?)
    }

    fn vjp_input(&mut self, x: &Image, cotangent: &VectorField) -> Result<Image, BackboneError> {
        check_input(self.spec, x)?;
        check_field(self.spec, cotangent)?;
        if !self.caps.has_analytic_vjp {
            return Err(BackboneError::Unsupported("input VJP"));
        }
        let mut p = Vec::new();
        encode_f32(x.data().iter().copied(), &mut p);
        encode_f32(field_values(cotangent), &mut p);
        let reply = self.request(Frame::new(Opcode::Vjp, p), Opcode::Grad)?;
        to_image(self.spec, decode_f32(&reply)?)
    }

    fn jvp_input(&mut self, x: &Image, tangent: &Image) -> Result<VectorField, BackboneError> {
        check_input(self.spec, x)?;
        check_input(self.spec, tangent)?;
        if !self.caps.has_jvp {
            return Err(BackboneError::Unsupported("input JVP"));
        }
        let mut p = Vec::new();
        encode_f32(x.data().iter().copied(), &mut p);
        encode_f32(tangent.data().iter().copied(), &mut p);
        let reply = self.request(Frame::new(Opcode::Jvp, p), Opcode::Out)?;
        to_field(self.spec, decode_f32(&reply)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::LinearSmoother;
    use std::os::unix::net::UnixStream;

    fn pair(spec: InputSpec) -> (BridgeClient, thread::JoinHandle<Result<(), BackboneError>>) {
        let (a, b) = UnixStream::pair().unwrap();
        let server = thread::spawn(move || {
            let mut bb = LinearSmoother::new(spec, 1);
            serve(&mut bb, b.try_clone().unwrap(), b)
        });
        let client =
            BridgeClient::connect(a.try_clone().unwrap(), a, spec, Duration::from_secs(5)).unwrap();
        (client, server)
    }

    #[test]
    fn frame_round_trip() {
        let f = Frame::new(Opcode::Vjp, vec![1, 2, 3, 4, 5]);
        let bytes = f.encode();
        assert_eq!(bytes.len(), 21);
        assert_eq!(read_frame(&mut bytes.as_slice()).unwrap(), Some(f));
        assert_eq!(read_frame(&mut [].as_slice()).unwrap(), None);
    }

    #[test]
    fn malformed_frames_are_rejected() {
        let mut bad = Frame::new(Opcode::Fwd, vec![]).encode();
        bad[0] = b'X';
        assert!(matches!(
            read_frame(&mut bad.as_slice()),
            Err(BackboneError::Protocol(_))
        ));
        let mut unknown = Frame::new(Opcode::Fwd, vec![]).encode();
        unknown[4] = 42;
        assert!(matches!(
            read_frame(&mut unknown.as_slice()),
            Err(BackboneError::Protocol(_))
        ));
        let short = &Frame::new(Opcode::Fwd, vec![0; 8]).encode()[..20];
        assert!(matches!(
            read_frame(&mut &short[..]),
            Err(BackboneError::Protocol(_))
        ));
    }

    #[test]
    fn f32_tensors_transfer_bit_exactly() {
        let vals: Vec<f64> = (0..50)
            .map(|i| ((i as f64) * 0.37).sin() as f32 as f64)
            .collect();
        let mut p = Vec::new();
        encode_f32(vals.iter().copied(), &mut p);
        assert_eq!(decode_f32(&p).unwrap(), vals);
    }

    #[test]
    fn client_matches_local_backbone() {
        let spec = Shape::new(6, 5, 3);
        let (mut client, server) = pair(spec);
        assert_eq!(client.caps(), Capabilities::ANALYTIC);
        let x = Image::from_fn(6, 5, 3, |r, c, k| {
            ((r + 2 * c + k) as f64 * 0.125) as f32 as f64
        });
        let mut local = LinearSmoother::new(spec, 1);
        let n = client.forward(&x).unwrap();
        let want = local.forward(&x).unwrap();
        for (a, b) in n.data().iter().zip(want.data()) {
            for k in 0..3 {
                assert_eq!(a[k], b[k] as f32 as f64);
            }
        }
        let g = VectorField::filled(6, 5, [0.5, -0.25, 0.125]);
        let v = client.vjp_input(&x, &g).unwrap();
        let vw = local.vjp_input(&x, &g).unwrap();
        for (a, b) in v.data().iter().zip(vw.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let zero = client.vjp_input(&x, &VectorField::zeros(6, 5)).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        client.close().unwrap();
        server.join().unwrap().unwrap();
    }

    #[test]
    fn shape_mismatch_is_reported_remotely() {
        let (a, b) = UnixStream::pair().unwrap();
        let server = thread::spawn(move || {
            let mut bb = LinearSmoother::new(Shape::new(4, 4, 3), 0);
            serve(&mut bb, b.try_clone().unwrap(), b)
        });
        let res = BridgeClient::connect(
            a.try_clone().unwrap(),
            a,
            Shape::new(5, 4, 3),
            Duration::from_secs(5),
        );
        assert!(matches!(res, Err(BackboneError::Remote(_))));
        drop(res);
        server.join().unwrap().unwrap();
    }

    #[test]
    fn silent_peer_times_out() {
        let (a, _b) = UnixStream::pair().unwrap();
        let res = BridgeClient::connect(
            a.try_clone().unwrap(),
            a,
            Shape::new(2, 2, 3),
            Duration::from_millis(50),
        );
        assert!(matches!(res, Err(BackboneError::Timeout(_))));
    }

    #[test]
    fn spawned_process_that_exits_is_a_transport_error() {
        let res = BridgeClient::spawn("exit 0", Shape::new(2, 2, 3), Duration::from_secs(5));
        assert!(matches!(res, Err(BackboneError::Transport(_))));
    }
}
