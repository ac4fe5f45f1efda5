//! Acceptance run. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

mod common;

use std::collections::VecDeque;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{user, Setup};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use vauth_client::*;
use vauth_core::authenticator::auth_data::{ParsedAuthData, FLAG_UV};
use vauth_core::authenticator::{default_registry, KeepaliveStatus};
use vauth_core::cbor::cose::CoseKey;
use vauth_core::cbor::messages::{
    decode_response, ClientPinParameters, CommandCode, CredentialParameter, MakeCredentialParameters,
    PinSubCommand, Request, Response, RpEntity,
};
use vauth_core::config::{Config, ProviderKind};
use vauth_core::credential::CredentialSource;
use vauth_core::crypto::{CredentialWrapper, ProviderRegistry, TpmEs256Provider};
use vauth_core::ctaphid::{cmd, Action, CtapHidLayer, LayerConfig, TransactionState, TransitionAudit};
use vauth_core::daemon::start_socket_daemon;
use vauth_core::device::ShutdownHandle;
use vauth_core::hid::{fragment, reassemble, Assembler, ChannelId, Packet, MAX_PAYLOAD};
use vauth_core::logging::{Direction, LogHub};
use vauth_core::policy::{AutoApprove, Scripted};
use vauth_core::storage::{AuthenticatorStorage, Backend, FileStore, MemoryStore, PinRecord, StorageError};
use vauth_core::tpm::{ByteArray, Tpm, STATUS_OK};
use vauth_core::transport::{Recording, SocketClient, Trace, Transport};
use vauth_oracle::Curve;

type Outcome = Result<Vec<String>, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>, what: &str) -> Result<T, String> {
    r.map_err(|e| format!("{what}: {e}"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Provider {
    Software,
    Tpm,
}

fn registry(p: Provider, tpm_dir: &Path, seed: u64) -> ProviderRegistry {
    match p {
        Provider::Software => default_registry(),
        Provider::Tpm => {
            std::fs::create_dir_all(tpm_dir).unwrap();
            let tpm = TpmEs256Provider::open(tpm_dir, "acceptance", b"user auth", Some(seed)).unwrap();
            ProviderRegistry::with_provider(Arc::new(tpm))
        }
    }
}

fn setup(p: Provider, tpm_dir: &Path, seed: u64) -> Setup {
    Setup { registry: registry(p, tpm_dir, seed), seed, ..Setup::default() }
}

fn seeded(seed: u64) -> Box<ChaCha20Rng> {
    Box::new(ChaCha20Rng::seed_from_u64(seed))
}

fn oracle_verify(key: &CoseKey, auth_data: &[u8], cdh: &[u8; 32], sig: &[u8]) -> bool {
    let mut msg = auth_data.to_vec();
    msg.extend_from_slice(cdh);
    Curve::p256().verify_der(&key.x, &key.y, &msg, sig)
}

fn is_keepalive(report: &[u8; 64]) -> bool {
    report[4] == 0x80 | cmd::KEEPALIVE
}

/// CTAP2 exchanges in `trace`, reduced to what must not depend on the
/// crypto provider: command, status and the authData structure. Keys,
/// signatures and credential ids are left out.
fn ctap2_trace(trace: &Trace) -> Vec<String> {
    let mut sent = Assembler::new();
    let mut received = Assembler::new();
    let mut pending = VecDeque::new();
    let mut lines = Vec::new();
    for (dir, report) in trace.lock().iter() {
        let Ok(packet) = Packet::parse(report) else { continue };
        match dir {
            Direction::Out => {
                if let Ok(Some(m)) = sent.push(packet) {
                    if m.cmd == cmd::CBOR {
                        pending.push_back(m.payload[0]);
                    }
                }
            }
            Direction::In => {
                if let Ok(Some(m)) = received.push(packet) {
                    if m.cmd == cmd::CBOR {
                        let command = pending.pop_front().expect("response without request");
                        lines.push(normalize(command, &m.payload));
                    }
                }
            }
        }
    }
    lines
}

fn auth_summary(auth_data: &[u8]) -> String {
    match ParsedAuthData::parse(auth_data) {
        Ok(a) => format!(
            "rp={} flags={:02x} ctr={} attested={}",
            hex::encode(&a.rp_id_hash[..4]),
            a.flags,
            a.counter,
            a.attested.as_ref().map_or("no".to_string(), |c| format!("alg{}", c.public_key.alg))
        ),
        Err(e) => format!("bad authData: {}", e.0),
    }
}

fn normalize(command: u8, payload: &[u8]) -> String {
    let Some(code) = CommandCode::from_u8(command) else { return format!("0x{command:02x} -> {payload:02x?}") };
    let body = match decode_response(code, payload) {
        Err(e) => format!("{e}"),
        Ok(Response::MakeCredential(r)) => format!("ok {} alg={} {}", r.fmt, r.att_stmt.alg, auth_summary(&r.auth_data)),
        Ok(Response::GetAssertion(r)) | Ok(Response::GetNextAssertion(r)) => format!(
            "ok {} n={:?} user={:?}",
            auth_summary(&r.auth_data),
            r.number_of_credentials,
            r.user.map(|u| hex::encode(u.id))
        ),
        Ok(Response::GetInfo(i)) => format!("ok {i:?}"),
        Ok(Response::ClientPin(p)) => format!(
            "ok ka={} token={:?} retries={:?}",
            p.key_agreement.is_some(),
            p.pin_token.map(|t| t.len()),
            p.retries
        ),
        Ok(Response::Reset) => "ok".into(),
    };
    format!("{} -> {body}", code.name())
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let mut lengths = vec![0usize, 1, 56, 57, 58, 115, 116, 117, 7608, 7609];
    lengths.extend((0..1000).map(|_| rng.gen_range(0..=MAX_PAYLOAD)));
    for (i, &n) in lengths.iter().enumerate() {
        let payload: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
        let cid = ChannelId(rng.gen_range(1..0xFFFF_FFFF));
        let packets = ok(fragment(cid, cmd::PING, &payload), "fragment")?;
        let expected = if n <= 57 { 1 } else { 1 + (n - 57 + 58) / 59 };
        check!(packets.len() == expected, "n={n}: {} packets, expected {expected}", packets.len());
        let msg = ok(reassemble(packets), "reassemble")?;
        check!(msg.payload == payload && msg.cid == cid && msg.cmd == cmd::PING, "n={n}: round trip differs (case {i})");
    }
    check!(fragment(ChannelId(1), cmd::PING, &vec![0; 7610]).is_err(), "7610 bytes accepted");
    let elapsed = t0.elapsed();
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(vec![format!("{} lengths in {elapsed:?}", lengths.len())])
}

/// Randomized packet and completion traffic straight into the layer.
fn random_replay(seed: u64, steps: usize) -> TransitionAudit {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut layer = CtapHidLayer::new(LayerConfig::default(), Arc::new(LogHub::disabled()));
    let mut channels = vec![ChannelId::BROADCAST, ChannelId(0x0DEA_D001)];
    let mut pending: Vec<u64> = Vec::new();
    let mut client = Assembler::new();
    let commands = [cmd::INIT, cmd::PING, cmd::CBOR, cmd::CANCEL, cmd::MSG, cmd::WINK, 0x33];
    for _ in 0..steps {
        let actions: Vec<Action> = match rng.gen_range(0..12) {
            0..=6 => {
                let cid = channels[rng.gen_range(0..channels.len())];
                let command = commands[rng.gen_range(0..commands.len())];
                let len = if command == cmd::INIT && rng.gen_bool(0.8) { 8 } else { rng.gen_range(0..130) };
                let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                let mut packets = fragment(cid, command, &payload).unwrap();
                if packets.len() > 1 && rng.gen_bool(0.1) {
                    packets.truncate(rng.gen_range(1..packets.len()));
                }
                if packets.len() > 2 && rng.gen_bool(0.05) {
                    packets.swap(1, 2);
                }
                packets.into_iter().flat_map(|p| layer.handle_packet(p)).collect()
            }
            7 | 8 if !pending.is_empty() => {
                let ticket = pending.swap_remove(rng.gen_range(0..pending.len()));
                layer.complete_transaction(ticket, vec![0; rng.gen_range(1..80)]).into_iter().collect()
            }
            9 if !pending.is_empty() => {
                layer.set_status(pending[0], KeepaliveStatus::UpNeeded);
                Vec::new()
            }
            10 => {
                let mut raw = [0u8; 64];
                rng.fill_bytes(&mut raw);
                raw[..4].copy_from_slice(&channels[rng.gen_range(0..channels.len())].to_bytes());
                layer.handle_report(&raw)
            }
            _ => layer.tick(Instant::now() + Duration::from_millis(rng.gen_range(0..35_000))),
        };
        for action in actions {
            match action {
                Action::Dispatch { ticket, .. } => pending.push(ticket),
                Action::Cancel { .. } => {}
                Action::Send(out) => {
                    for r in &out.reports {
                        if let Ok(Some(m)) = client.push(Packet::parse(r).unwrap()) {
                            if m.cmd == cmd::INIT && m.payload.len() == 17 {
                                let cid = ChannelId::from_bytes(m.payload[8..12].try_into().unwrap());
                                if !channels.contains(&cid) {
                                    channels.push(cid);
                                }
                            }
                        }
                    }
                }
            }
        }
        let open = channels
            .iter()
            .filter(|c| matches!(layer.state(**c), TransactionState::RequestRecv | TransactionState::ResponseSet))
            .count();
        assert!(open <= 1, "two transactions open at once");
    }
    layer.audit().clone()
}

fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c2.sock");
    let policy = Arc::new(Scripted::new([true], Duration::from_millis(500)));
    let device = Setup { policy, ..Setup::default() }.on_socket(&path);
    let mut a = HidClient::new(ok(SocketClient::connect(&path), "connect")?);
    let mut b = HidClient::new(ok(SocketClient::connect(&path), "connect")?);
    ok(a.init(), "init a")?;
    ok(b.init(), "init b")?;
    let a_cid = a.cid();
    let first = std::thread::spawn(move || {
        let mut state = ClientState::default();
        client_register(&mut a, &mut state, "busy.example", user(1), &RegisterOptions::default()).map(|_| ())
    });
    std::thread::sleep(Duration::from_millis(200));
    let busy = b.ping(b"second client");
    check!(busy.as_ref().err().and_then(ClientError::code) == Some(0x06), "second channel got {busy:?}");
    ok(first.join().unwrap(), "first transaction")?;
    check!(ok(b.ping(b"after"), "ping after")? == b"after", "echo after busy");
    let live = device.audit();
    device.stop();
    check!(live.is_clean(), "live audit {live:?}");
    check!(a_cid != b.cid(), "channels must differ");

    let mut transitions = 0;
    for seed in 0..10_000 {
        let audit = random_replay(seed, 25);
        check!(audit.is_clean(), "replay {seed}: {audit:?}");
        transitions += audit.transitions;
    }
    let elapsed = t0.elapsed();
    check!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(vec![format!("10000 replays, {transitions} audited transitions, 0 illegal, {elapsed:?}")])
}

fn scenario_3<T: Transport>(c: &mut HidClient<T>) -> Result<(), String> {
    ok(c.init(), "init")?;
    let mut state = ClientState::default();
    for (rp, rk) in [("example.com", Some(true)), ("example.org", Some(false))] {
        let opts = RegisterOptions { resident: rk, ..Default::default() };
        let reg = ok(client_register(c, &mut state, rp, user(1), &opts), "client_register")?;
        let key = reg.record.public_key();
        check!(oracle_verify(&key, &reg.auth_data, &reg.client_data_hash, &reg.signature), "{rp}: attestation rejected by oracle");
        let allow = if rk == Some(false) { Some(reg.record.credential_id.clone()) } else { None };
        let reports = ok(client_assert(c, &mut state, rp, allow.as_deref(), None), "client_assert")?;
        for r in &reports {
            check!(oracle_verify(&key, &r.auth_data, &r.client_data_hash, &r.signature), "{rp}: assertion rejected by oracle");
        }
    }
    Ok(())
}

fn criterion_3(p: Provider) -> Outcome {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (device, end) = setup(p, &dir.path().join("tpm-loop"), 31).on_loopback();
    let rec = Recording::new(end);
    let loop_trace = rec.trace();
    let mut c = HidClient::with_rng(rec, seeded(99));
    scenario_3(&mut c)?;
    device.stop();

    let path = dir.path().join("c3.sock");
    let device = setup(p, &dir.path().join("tpm-sock"), 31).on_socket(&path);
    let rec = Recording::new(ok(SocketClient::connect(&path), "connect")?);
    let sock_trace = rec.trace();
    let mut c = HidClient::with_rng(rec, seeded(99));
    scenario_3(&mut c)?;
    device.stop();

    let strip = |t: &Trace| -> Vec<(Direction, [u8; 64])> {
        t.lock().iter().filter(|(_, r)| !is_keepalive(r)).cloned().collect()
    };
    let (a, b) = (strip(&loop_trace), strip(&sock_trace));
    check!(!a.is_empty() && a == b, "traces differ: {} vs {} reports", a.len(), b.len());
    let elapsed = t0.elapsed();
    check!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(ctap2_trace(&loop_trace))
}

fn criterion_4(p: Provider) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut config = Config::default();
    config.storage_path = dir.path().join("store.json");
    config.socket_path = dir.path().join("c4.sock");
    config.log_dir = None;
    config.tpm_dir = dir.path().join("tpm");
    config.crypto_provider = match p {
        Provider::Software => ProviderKind::Software,
        Provider::Tpm => ProviderKind::Tpm,
    };
    let mut state = ClientState::default();
    let mut counters = Vec::new();
    let mut lines = Vec::new();
    let mut last_id = Vec::new();
    for half in 0..2 {
        let (handle, _) = ok(start_socket_daemon(&config, Arc::new(AutoApprove), None, ShutdownHandle::new()), "daemon start")?;
        let rec = Recording::new(ok(SocketClient::connect(&config.socket_path), "connect")?);
        let trace = rec.trace();
        let mut c = HidClient::with_rng(rec, seeded(40 + half));
        ok(c.init(), "init")?;
        for op in half * 25..(half + 1) * 25 {
            if op % 2 == 0 {
                let reg = ok(client_register(&mut c, &mut state, "counter.example", user(op as u8), &RegisterOptions::default()), "register")?;
                counters.push(reg.record.counter);
                last_id = reg.record.credential_id;
            } else {
                let r = ok(client_assert(&mut c, &mut state, "counter.example", Some(&last_id), None), "assert")?;
                counters.push(r[0].counter);
            }
        }
        drop(handle.stop());
        lines.extend(ctap2_trace(&trace));
    }
    check!(counters.len() == 50, "{} operations", counters.len());
    check!(counters.windows(2).all(|w| w[0] < w[1]), "not strictly increasing: {counters:?}");
    Ok(lines)
}

fn criterion_5(p: Provider) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (device, end) = setup(p, dir.path(), 51).on_loopback();
    let rec = Recording::new(end);
    let trace = rec.trace();
    let mut c = HidClient::with_rng(rec, seeded(5));
    ok(c.init(), "init")?;
    let mut state = ClientState::default();
    let mut ids = Vec::new();
    for n in 1..=3 {
        ids.push(ok(client_register(&mut c, &mut state, "order.example", user(n), &RegisterOptions::default()), "register")?.record.credential_id);
    }
    let reports = ok(client_assert(&mut c, &mut state, "order.example", None, None), "assert")?;
    let got: Vec<_> = reports.iter().map(|r| r.credential_id.clone()).collect();
    ids.reverse();
    check!(got == ids, "order differs from newest-first");
    check!(reports[0].number_of_credentials == Some(3), "numberOfCredentials {:?}", reports[0].number_of_credentials);
    let users: Vec<u8> = reports.iter().map(|r| r.user.as_ref().map_or(0, |u| u.id[0])).collect();
    check!(users == vec![3, 2, 1], "users {users:?}");
    let extra = c.cbor(&Request::GetNextAssertion);
    check!(extra.as_ref().err().and_then(ClientError::code) == Some(0x30), "fourth getNextAssertion gave {extra:?}");
    device.stop();
    Ok(ctap2_trace(&trace))
}

fn pin_request(c: &mut HidClient<impl Transport>, p: ClientPinParameters) -> Result<vauth_core::cbor::messages::ClientPinResponse, ClientError> {
    match c.cbor(&Request::ClientPin(p))? {
        Response::ClientPin(r) => Ok(r),
        other => Err(ClientError::Protocol(format!("{:?}", other.command()))),
    }
}

fn pin_base(sub: PinSubCommand) -> ClientPinParameters {
    ClientPinParameters { pin_protocol: 1, sub_command: sub, key_agreement: None, pin_auth: None, new_pin_enc: None, pin_hash_enc: None }
}

/// Platform half of the PIN protocol computed with the reference
/// arithmetic only.
struct OraclePlatform {
    scalar: [u8; 32],
    public: CoseKey,
}

impl OraclePlatform {
    fn new(scalar: [u8; 32]) -> Self {
        let (x, y) = Curve::p256().public_key(&scalar);
        OraclePlatform { scalar, public: CoseKey { alg: -25, x, y } }
    }

    fn shared(&self, auth_key: &CoseKey) -> [u8; 32] {
        vauth_oracle::sha256(&Curve::p256().ecdh_x(&self.scalar, &auth_key.x, &auth_key.y).unwrap())
    }
}

fn key_agreement(c: &mut HidClient<impl Transport>) -> Result<CoseKey, String> {
    ok(pin_request(c, pin_base(PinSubCommand::GetKeyAgreement)), "getKeyAgreement")?
        .key_agreement
        .ok_or_else(|| "no keyAgreement".to_string())
}

fn retries(c: &mut HidClient<impl Transport>) -> Result<u8, String> {
    ok(pin_request(c, pin_base(PinSubCommand::GetRetries)), "getRetries")?.retries.ok_or_else(|| "no retries".to_string())
}

fn token_attempt(c: &mut HidClient<impl Transport>, platform: &OraclePlatform, pin: &[u8]) -> Result<Result<Vec<u8>, u8>, String> {
    let ka = key_agreement(c)?;
    let shared = platform.shared(&ka);
    let hash16: [u8; 16] = vauth_oracle::sha256(pin)[..16].try_into().unwrap();
    let mut p = pin_base(PinSubCommand::GetPinToken);
    p.key_agreement = Some(platform.public.clone());
    p.pin_hash_enc = Some(vauth_oracle::aes256_cbc_encrypt(&shared, &[0; 16], &hash16).try_into().unwrap());
    match pin_request(c, p) {
        Ok(r) => {
            let enc = r.pin_token.ok_or("no pinToken")?;
            Ok(Ok(vauth_oracle::aes256_cbc_decrypt(&shared, &[0; 16], &enc)))
        }
        Err(e) => Ok(Err(e.code().ok_or(format!("{e}"))?)),
    }
}

fn criterion_6(p: Provider) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (device, end) = setup(p, dir.path(), 61).on_loopback();
    let rec = Recording::new(end);
    let trace = rec.trace();
    let mut c = HidClient::with_rng(rec, seeded(6));
    ok(c.init(), "init")?;
    let platform = OraclePlatform::new([0x42; 32]);
    check!(retries(&mut c)? == 8, "initial retries");

    let ka = key_agreement(&mut c)?;
    let shared = platform.shared(&ka);
    let mut padded = [0u8; 64];
    padded[..6].copy_from_slice(b"135790");
    let new_pin_enc = vauth_oracle::aes256_cbc_encrypt(&shared, &[0; 16], &padded);
    let mut sp = pin_base(PinSubCommand::SetPin);
    sp.key_agreement = Some(platform.public.clone());
    sp.pin_auth = Some(vauth_oracle::hmac_sha256(&shared, &new_pin_enc)[..16].try_into().unwrap());
    sp.new_pin_enc = Some(new_pin_enc);
    ok(pin_request(&mut c, sp), "setPin")?;

    let mut keys = vec![key_agreement(&mut c)?];
    for _ in 0..2 {
        check!(token_attempt(&mut c, &platform, b"000000")? == Err(0x31), "wrong PIN not rejected with 0x31");
        keys.push(key_agreement(&mut c)?);
    }
    check!(keys[0] != keys[1] && keys[1] != keys[2], "key agreement key not rotated");
    let left = retries(&mut c)?;
    check!(left == 6, "retries after two failures: {left}");
    let token = token_attempt(&mut c, &platform, b"135790")?.map_err(|code| format!("correct PIN gave 0x{code:02x}"))?;
    check!(token.len() == 16, "token length {}", token.len());
    check!(retries(&mut c)? == 8, "retries not restored");

    let cdh = [0x66; 32];
    let mut mc = MakeCredentialParameters {
        client_data_hash: cdh,
        rp: RpEntity { id: "pin.example".into(), name: None },
        user: user(6),
        pub_key_cred_params: vec![CredentialParameter { cred_type: "public-key".into(), alg: -7 }],
        exclude_list: None,
        options: Default::default(),
        pin_auth: Some([0; 16]),
        pin_protocol: Some(1),
    };
    let bad = c.cbor(&Request::MakeCredential(mc.clone()));
    check!(bad.as_ref().err().and_then(ClientError::code) == Some(0x33), "bad pinAuth gave {bad:?}");
    mc.pin_auth = Some(vauth_oracle::hmac_sha256(&token, &cdh)[..16].try_into().unwrap());
    let resp = match ok(c.cbor(&Request::MakeCredential(mc)), "makeCredential with pinAuth")? {
        Response::MakeCredential(r) => r,
        _ => return Err("wrong response".into()),
    };
    let parsed = ok(ParsedAuthData::parse(&resp.auth_data).map_err(|e| e.0), "authData")?;
    check!(parsed.flags & FLAG_UV != 0, "UV flag missing");
    let key = parsed.attested.ok_or("no attested data")?.public_key;
    check!(oracle_verify(&key, &resp.auth_data, &cdh, &resp.att_stmt.sig), "attestation rejected by oracle");
    device.stop();
    Ok(ctap2_trace(&trace))
}

fn random_source(rng: &mut ChaCha20Rng) -> CredentialSource {
    let len = rng.gen_range(1..40);
    CredentialSource {
        id: Vec::new(),
        rp_id: (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect(),
        rp_name: rng.gen_bool(0.5).then(|| "Relying Party".to_string()),
        user: vauth_core::cbor::messages::UserEntity {
            id: (0..rng.gen_range(1..=64)).map(|_| rng.gen()).collect(),
            name: rng.gen_bool(0.7).then(|| format!("u{}", rng.gen::<u32>())),
            display_name: None,
        },
        alg: -7,
        key: (0..rng.gen_range(32..200)).map(|_| rng.gen()).collect(),
        created: rng.gen_range(0..1 << 32),
    }
}

fn criterion_7(p: Provider) -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let mut kek = [0u8; 32];
    rng.fill_bytes(&mut kek);
    let wrapper = CredentialWrapper::new(kek);
    let mut wrapped = Vec::new();
    for _ in 0..200 {
        let source = random_source(&mut rng);
        let blob = ok(wrapper.wrap(&source.serialize()), "wrap")?;
        let back = ok(wrapper.unwrap(&blob), "unwrap")?;
        check!(ok(CredentialSource::deserialize(&back), "deserialize")? == source, "unwrap(wrap(x)) != x");
        wrapped.push(blob);
    }
    for i in 0..1000 {
        let mut blob = wrapped[i % wrapped.len()].clone();
        let pos = rng.gen_range(0..blob.len());
        blob[pos] ^= rng.gen_range(1..=255u8);
        check!(wrapper.unwrap(&blob).is_err(), "mutation {i} at byte {pos} accepted");
    }

    let dir = tempfile::tempdir().unwrap();
    let (device, end) = setup(p, dir.path(), 71).on_loopback();
    let rec = Recording::new(end);
    let trace = rec.trace();
    let mut c = HidClient::with_rng(rec, seeded(77));
    ok(c.init(), "init")?;
    let mut state = ClientState::default();
    let opts = RegisterOptions { resident: Some(false), ..Default::default() };
    let reg = ok(client_register(&mut c, &mut state, "wrap.example", user(7), &opts), "register")?;
    let id = reg.record.credential_id.clone();
    let discover = client_assert(&mut c, &mut state, "wrap.example", None, None);
    check!(discover.as_ref().err().and_then(ClientError::code) == Some(0x2E), "non-resident credential was discoverable");
    let r = ok(client_assert(&mut c, &mut state, "wrap.example", Some(&id), None), "assert via allowList")?;
    check!(r[0].credential_id == id, "wrong credential");
    ok(reset(&mut c, &mut state), "reset")?;
    let after = client_assert(&mut c, &mut state, "wrap.example", Some(&id), None);
    check!(after.as_ref().err().and_then(ClientError::code) == Some(0x2E), "id still valid after reset: {after:?}");
    device.stop();
    Ok(ctap2_trace(&trace))
}

fn apply_script<S: AuthenticatorStorage + ?Sized>(store: &mut S, seed: u64) -> Result<(), StorageError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for op in 0..100u64 {
        match rng.gen_range(0..5) {
            0 => {
                store.increment_counter()?;
            }
            1 | 2 => {
                let mut source = random_source(&mut rng);
                source.rp_id = format!("rp{}.example", rng.gen_range(0..4));
                source.id = op.to_be_bytes().to_vec();
                store.add_credential_source(&source)?;
            }
            3 => {
                let record = rng.gen_bool(0.8).then(|| PinRecord { pin_hash: rng.gen(), retries: rng.gen_range(0..=8) });
                store.set_pin_record(record)?;
            }
            _ => store.set_wrap_key(rng.gen())?,
        }
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let enc_path = dir.path().join("store.enc");
    let plain_path = dir.path().join("store.json");
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let backend = || Backend::encrypted_with_iterations("open sesame", 1000);
    {
        let mut enc = ok(FileStore::open_or_init(&enc_path, backend(), &mut ChaCha20Rng::seed_from_u64(80)), "open encrypted")?;
        let mut plain = ok(FileStore::open_or_init(&plain_path, Backend::Plaintext, &mut ChaCha20Rng::seed_from_u64(80)), "open plaintext")?;
        ok(enc.set_wrap_key(plain.wrap_key()), "align wrap key")?;
        let mut mem = MemoryStore::new(plain.wrap_key());
        check!(enc.document() == plain.document(), "fresh documents differ");
        ok(apply_script(&mut enc, 800), "script on encrypted")?;
        ok(apply_script(&mut plain, 800), "script on plaintext")?;
        ok(apply_script(&mut mem, 800), "script in memory")?;
        check!(enc.document() == plain.document(), "backends diverged after script");
        check!(mem.document() == plain.document(), "memory store diverged after script");
    }
    {
        let enc = ok(FileStore::open_or_init(&enc_path, backend(), &mut rng), "reopen encrypted")?;
        let plain = ok(FileStore::open_or_init(&plain_path, Backend::Plaintext, &mut rng), "reopen plaintext")?;
        check!(enc.document() == plain.document(), "reloaded documents differ");
    }
    let wrong = FileStore::open_or_init(&enc_path, Backend::encrypted_with_iterations("open says me", 1000), &mut rng);
    check!(matches!(wrong, Err(StorageError::Authentication)), "wrong password gave {:?}", wrong.err());

    let original = std::fs::read(&enc_path).unwrap();
    let victim = dir.path().join("mutated.enc");
    for i in 0..1000 {
        let mut bytes = original.clone();
        let pos = rng.gen_range(0..bytes.len());
        bytes[pos] ^= rng.gen_range(1..=255u8);
        std::fs::write(&victim, &bytes).unwrap();
        let opened = FileStore::open_or_init(&victim, Backend::encrypted_with_iterations("open sesame", 1000), &mut rng);
        check!(opened.is_err(), "mutation {i} at byte {pos} produced a document");
    }
    Ok(vec![format!("{} byte store, 1000 mutations rejected", original.len())])
}

fn criterion_9(software: &[(u8, Vec<String>)]) -> Outcome {
    let runs: [(u8, fn(Provider) -> Outcome); 5] =
        [(3, criterion_3), (4, criterion_4), (5, criterion_5), (6, criterion_6), (7, criterion_7)];
    let mut lines = Vec::new();
    for (n, run) in runs {
        let tpm = run(Provider::Tpm).map_err(|e| format!("criterion {n} with the TPM provider: {e}"))?;
        let soft = software
            .iter()
            .find(|(m, _)| *m == n)
            .map(|(_, t)| t)
            .ok_or(format!("criterion {n} did not pass with the software provider"))?;
        check!(!tpm.is_empty(), "criterion {n}: empty trace");
        if let Some(i) = (0..tpm.len().max(soft.len())).find(|&i| tpm.get(i) != soft.get(i)) {
            return Err(format!("criterion {n} traces differ at exchange {i}: {:?} vs {:?}", soft.get(i), tpm.get(i)));
        }
        lines.push(format!("criterion {n}: {} identical exchanges", tpm.len()));
    }
    Ok(lines)
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let user_label = ByteArray::from("alice");
    let auth = ByteArray::from("alice-auth");
    let rp = ByteArray::from("tpm.example");
    let rp_auth = ByteArray::from("rp-auth");
    let (user_blob, rp_key) = {
        let mut tpm = Tpm::new();
        check!(tpm.setup(dir.path(), None) == STATUS_OK, "setup: {}", tpm.get_last_error());
        let user_blob = tpm.create_and_load_user_key(&user_label, &auth);
        check!(!user_blob.is_empty(), "user key: {}", tpm.get_last_error());
        let rp_key = tpm.create_and_load_rp_key(&rp, &auth, &rp_auth);
        check!(!rp_key.key_blob.is_empty(), "rp key: {}", tpm.get_last_error());
        (user_blob, rp_key)
    };
    check!(dir.path().join(vauth_core::tpm::SRK_FILE).exists(), "SRK not persisted");

    // A new instance on the same directory stands in for a process restart.
    let mut tpm = Tpm::new();
    check!(tpm.setup(dir.path(), None) == STATUS_OK, "second setup");
    check!(tpm.load_user_key(&user_blob, &user_label) == STATUS_OK, "reload user: {}", tpm.get_last_error());
    let point = tpm.load_rp_key(&rp_key.key_blob, &rp, &auth);
    check!(point == rp_key.key_point, "reloaded rp key differs");

    let digest = vauth_oracle::sha256(b"prehashed message");
    let sig = tpm.sign_using_rp_key(&rp, &ByteArray::new(digest.to_vec()), &rp_auth);
    check!(!sig.is_empty(), "sign: {}", tpm.get_last_error());
    check!(
        Curve::p256().verify_prehashed(point.x_coord.data(), point.y_coord.data(), &digest, sig.sig_r.data(), sig.sig_s.data()),
        "oracle rejected prehashed signature"
    );

    let mut failures = Vec::new();
    let wrong_auth = tpm.load_rp_key(&rp_key.key_blob, &rp, &ByteArray::from("not-alice"));
    failures.push(("wrong user_auth", wrong_auth.is_empty()));
    let oversized = tpm.sign_using_rp_key(&rp, &ByteArray::new(vec![1u8; 33]), &rp_auth);
    failures.push(("33-byte digest", oversized.is_empty()));
    let bob = ByteArray::from("bob");
    let bob_auth = ByteArray::from("bob-auth");
    check!(!tpm.create_and_load_user_key(&bob, &bob_auth).is_empty(), "second user");
    let wrong_parent = tpm.load_rp_key(&rp_key.key_blob, &rp, &bob_auth);
    failures.push(("wrong parent", wrong_parent.is_empty()));
    for (what, failed) in failures {
        check!(failed, "{what} succeeded");
    }
    // Each failure sets lastError; reading clears it.
    let _ = tpm.sign_using_rp_key(&rp, &ByteArray::new(vec![1u8; 33]), &rp_auth);
    let err = tpm.get_last_error();
    check!(!err.is_empty(), "lastError not set");
    check!(tpm.get_last_error().is_empty(), "lastError not cleared");
    let _ = tpm.load_rp_key(&rp_key.key_blob, &rp, &bob_auth);
    check!(!tpm.get_last_error().is_empty(), "lastError not set for wrong parent");
    check!(tpm.load_user_key(&user_blob, &user_label) == STATUS_OK, "reload alice");
    let _ = tpm.load_rp_key(&rp_key.key_blob, &rp, &ByteArray::from("nope"));
    check!(!tpm.get_last_error().is_empty(), "lastError not set for wrong auth");
    check!(tpm.get_last_error().is_empty(), "lastError not cleared");
    Ok(vec![err])
}

fn criterion_11() -> Outcome {
    let (device, end) = Setup::default().on_loopback();
    let mut c = HidClient::with_rng(end, seeded(11));
    ok(c.init(), "init")?;
    for payload in [vec![], vec![0x00], vec![0xAB; 100]] {
        let r = c.transact(cmd::MSG, &payload);
        check!(r.as_ref().err().and_then(ClientError::code) == Some(0x01), "MSG gave {r:?}");
    }
    for command in [0x00, 0x02, 0x12, 0x30, 0x7E] {
        let r = c.transact(command, &[1, 2, 3]);
        check!(r.as_ref().err().and_then(ClientError::code) == Some(0x01), "command 0x{command:02x} gave {r:?}");
    }
    let mut rng = ChaCha20Rng::seed_from_u64(111);
    let mut lengths = vec![0usize, 1, 56, 57, 58, 59, 115, 116, 117, 1024, 7608, 7609];
    lengths.extend((0..20).map(|_| rng.gen_range(0..=MAX_PAYLOAD)));
    for n in &lengths {
        let payload: Vec<u8> = (0..*n).map(|_| rng.gen()).collect();
        let echo = ok(c.ping(&payload), "ping")?;
        check!(echo == payload, "echo of {n} bytes differs");
    }
    let too_long = c.send(c.cid(), cmd::PING, &vec![0; MAX_PAYLOAD + 1]);
    check!(too_long.is_err(), "client framed an oversize ping");
    device.stop();
    Ok(vec![format!("{} ping lengths echoed", lengths.len())])
}

fn run(n: u8, title: &str, f: impl FnOnce() -> Outcome) -> Option<Vec<String>> {
    let t0 = Instant::now();
    let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let elapsed = t0.elapsed();
    match result {
        Ok(lines) => {
            println!("PASS criterion {n:>2}: {title} ({:.2}s)", elapsed.as_secs_f64());
            Some(lines)
        }
        Err(e) => {
            println!("FAIL criterion {n:>2}: {title} ({:.2}s): {e}", elapsed.as_secs_f64());
            None
        }
    }
}

fn main() {
    let mut failed = 0;
    let mut tally = |r: &Option<Vec<String>>| {
        if r.is_none() {
            failed += 1;
        }
    };
    tally(&run(1, "framing round trip and packet counts", criterion_1));
    tally(&run(2, "busy error and transition audit", criterion_2));
    let mut software = Vec::new();
    let titles = [
        (3u8, "register/assert over loopback and socket", criterion_3 as fn(Provider) -> Outcome),
        (4, "counter monotonic across restart", criterion_4),
        (5, "newest-first credential order", criterion_5),
        (6, "client PIN protocol against oracle", criterion_6),
        (7, "credential wrapping and reset", criterion_7),
    ];
    for (n, title, f) in titles {
        let r = run(n, title, || f(Provider::Software));
        tally(&r);
        if let Some(trace) = r {
            software.push((n, trace));
        }
    }
    tally(&run(8, "encrypted storage", criterion_8));
    tally(&run(9, "TPM provider interchangeability", || criterion_9(&software)));
    tally(&run(10, "TPM simulator contract", criterion_10));
    tally(&run(11, "MSG/unknown commands and PING echo", criterion_11));
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
