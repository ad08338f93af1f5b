//! Codec robustness runs: random and mutated frames must decode to a value
//! or an error, never a panic; generated messages must round-trip exactly.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use gitfarm_protocol::{
    BackendHello, ClientHello, Codec, Command, CommandResult, ErrorCode, SessionAccepted,
    SessionClose, SessionError, SessionGrant, SessionMessage, WorkspaceType,
};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameFuzzOutcome {
    pub frames: u64,
    pub decoded: u64,
    pub rejected: u64,
    pub panics: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTripOutcome {
    pub messages: u64,
    pub exact: u64,
    pub encode_errors: u64,
    pub mismatches: Vec<String>,
}

const ERROR_CODES: [ErrorCode; 8] = [
    ErrorCode::Unauthenticated,
    ErrorCode::PermissionDenied,
    ErrorCode::ResourceExhausted,
    ErrorCode::Unavailable,
    ErrorCode::Deadline,
    ErrorCode::InvalidArgument,
    ErrorCode::Internal,
    ErrorCode::Aborted,
];

fn ident(rng: &mut ChaCha8Rng) -> String {
    const CHARS: &[u8] = b"abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789_.-";
    let n = rng.random_range(1..17);
    (0..n)
        .map(|_| CHARS[rng.random_range(0..CHARS.len())] as char)
        .collect()
}

fn text(rng: &mut ChaCha8Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| match rng.random_range(0..10) {
            0 => char::from_u32(rng.random_range(0..0x11_0000)).unwrap_or('\u{fffd}'),
            1 => ['"', '\\', '\n', '\t', '\0', '{', '}'][rng.random_range(0..7)],
            _ => rng.random_range(b' '..=b'~') as char,
        })
        .collect()
}

fn bytes(rng: &mut ChaCha8Rng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random()).collect()
}

fn command(rng: &mut ChaCha8Rng) -> Command {
    let mut cmd = Command::new(ident(rng), ident(rng));
    cmd.arguments = (0..rng.random_range(0..6)).map(|_| text(rng, 24)).collect();
    if rng.random_bool(0.3) {
        cmd.stdin = Some(bytes(rng, 256));
    }
    let env: BTreeMap<String, String> = (0..rng.random_range(0..3))
        .map(|_| {
            (
                format!("K_{}", ident(rng).replace(['.', '-'], "_").to_uppercase()),
                text(rng, 16),
            )
        })
        .collect();
    cmd.environment = env;
    cmd
}

/// A random message of any variant.
pub fn message(rng: &mut ChaCha8Rng) -> SessionMessage {
    match rng.random_range(0..7) {
        0 => {
            let mut h = ClientHello::new(ident(rng), text(rng, 40));
            h.version = rng.random();
            SessionMessage::ClientHello(h)
        }
        1 => SessionMessage::SessionAccepted(SessionAccepted {
            session_id: ident(rng),
            node_id: ident(rng),
        }),
        2 => SessionMessage::SubmitCommand(command(rng)),
        3 => SessionMessage::ServerResult(CommandResult {
            alias: ident(rng),
            exit_code: rng.random(),
            stdout: bytes(rng, 512),
            stderr: bytes(rng, 128),
            truncated: rng.random(),
        }),
        4 => SessionMessage::SessionError(SessionError::new(
            ERROR_CODES[rng.random_range(0..ERROR_CODES.len())],
            text(rng, 60),
        )),
        5 => SessionMessage::SessionClose(SessionClose {
            reason: text(rng, 30),
        }),
        _ => SessionMessage::BackendHello(BackendHello {
            version: rng.random(),
            workspace_type: WorkspaceType::FullCheckout,
            grant: SessionGrant {
                lease_id: ident(rng),
                node_id: ident(rng),
                repo_id: ident(rng),
                client_id: ident(rng),
                display_name: text(rng, 20),
                expires_at_ms: rng.random(),
            },
            provenance: ident(rng),
        }),
    }
}

/// One hostile frame: pure noise, noise behind a plausible length prefix,
/// or a valid frame with bytes flipped, dropped or appended.
fn hostile_frame(rng: &mut ChaCha8Rng, codec: &Codec) -> Vec<u8> {
    match rng.random_range(0..4) {
        0 => bytes(rng, 128),
        1 => {
            let body = bytes(rng, 256);
            let mut f = (body.len() as u32).to_be_bytes().to_vec();
            f.extend(body);
            f
        }
        _ => {
            let mut f = codec.encode(&message(rng)).unwrap_or_default();
            if f.is_empty() {
                return f;
            }
            match rng.random_range(0..4) {
                0 => {
                    for _ in 0..rng.random_range(1..4) {
                        let i = rng.random_range(0..f.len());
                        f[i] ^= 1 << rng.random_range(0..8);
                    }
                }
                1 => f.truncate(rng.random_range(0..f.len())),
                2 => f.extend(bytes(rng, 8)),
                _ => {
                    let i = rng.random_range(4..f.len().max(5));
                    if i < f.len() {
                        f[i] = *b"{}[]\":,0\\".get(rng.random_range(0..9)).unwrap_or(&b'x');
                    }
                }
            }
            f
        }
    }
}

pub fn fuzz_frames(count: u64, seed: u64) -> FrameFuzzOutcome {
    let codec = Codec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = FrameFuzzOutcome::default();
    for _ in 0..count {
        let frame = hostile_frame(&mut rng, &codec);
        out.frames += 1;
        match catch_unwind(AssertUnwindSafe(|| codec.decode(&frame))) {
            Ok(Ok(_)) => out.decoded += 1,
            Ok(Err(_)) => out.rejected += 1,
            Err(_) => out.panics += 1,
        }
    }
    out
}

pub fn round_trips(count: u64, seed: u64) -> RoundTripOutcome {
    let codec = Codec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = RoundTripOutcome::default();
    for i in 0..count {
        let msg = message(&mut rng);
        out.messages += 1;
        let frame = match codec.encode(&msg) {
            Ok(f) => f,
            Err(e) => {
                out.encode_errors += 1;
                out.mismatches
                    .push(format!("#{i} {}: encode: {e}", msg.kind()));
                continue;
            }
        };
        match codec.decode(&frame) {
            Ok(back) if back == msg => out.exact += 1,
            Ok(back) => out.mismatches.push(format!("#{i}: {msg:?} != {back:?}")),
            Err(e) => out
                .mismatches
                .push(format!("#{i} {}: decode: {e}", msg.kind())),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_runs_are_clean() {
        let f = fuzz_frames(2_000, 1);
        assert_eq!(f.panics, 0);
        assert_eq!(f.decoded + f.rejected, 2_000);
        assert!(f.rejected > 0);
        let r = round_trips(500, 2);
        assert_eq!(
            r.exact,
            500,
            "{:?}",
            &r.mismatches[..r.mismatches.len().min(3)]
        );
    }

    #[test]
    fn generation_is_seeded() {
        let a: Vec<_> = (0..20)
            .scan(ChaCha8Rng::seed_from_u64(5), |r, _| Some(message(r)))
            .collect();
        let b: Vec<_> = (0..20)
            .scan(ChaCha8Rng::seed_from_u64(5), |r, _| Some(message(r)))
            .collect();
        assert_eq!(a, b);
    }
}
