use std::collections::VecDeque;
use std::net::Ipv4Addr;

use aurora::channel::fifo::{self, SharedAllocator};
use aurora::channel::frame::{self, SealedFrame, FRAME_SIZE, MAX_PAYLOAD};
use aurora::channel::{ChannelError, Direction, PlainFrame, RequestMode, Session};
use aurora::devices::DeviceId;
use aurora::harness::{corpus, run_attack};
use aurora::net::wire::{udp_frame, Ipv4Header, Udp, ETH_HDR};
use aurora::platform::{access_allowed, AccessOp, Context, ExecutionMode, PlatformConfig, SmiSource};
use aurora::ssv::flow::{internet_checksum, ipv4_tag, rewrite_tag};
use aurora::time_tss::{ClockSample, TimeConfig, TimeService, TimeValue};
use aurora::{Actor, DomainKind, Machine, MachineConfig, Platform};
use proptest::prelude::*;

fn numbered(n: u64) -> SealedFrame {
    let mut b = [0u8; FRAME_SIZE];
    b[..8].copy_from_slice(&n.to_be_bytes());
    SealedFrame(Box::new(b))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// The ring behaves as a bounded queue: order kept, never over capacity.
    #[test]
    fn fifo_matches_a_bounded_queue(cap in 1usize..12, ops in prop::collection::vec(any::<bool>(), 1..200)) {
        let mut p = Platform::new(PlatformConfig::default());
        let pair = SharedAllocator::new(p.config().shared_size).alloc_pair(cap).unwrap();
        let f = pair.to_ssv;
        let mut model = VecDeque::new();
        let mut next = 0u64;
        for push in ops {
            if push {
                let r = fifo::enqueue(&mut p, Actor::Os, &f, &numbered(next));
                if model.len() < cap {
                    prop_assert!(r.is_ok());
                    model.push_back(next);
                } else {
                    prop_assert_eq!(r, Err(ChannelError::FifoFull));
                }
                next += 1;
            } else {
                let got = fifo::dequeue(&mut p, Actor::Os, &f).unwrap();
                let want = model.pop_front();
                prop_assert_eq!(got.map(|g| u64::from_be_bytes(g.as_bytes()[..8].try_into().unwrap())), want);
            }
            prop_assert_eq!(fifo::len(&mut p, Actor::Os, &f).unwrap(), model.len());
        }
    }

    /// Sealing is invertible, and any change to the sealed bytes is caught.
    #[test]
    fn frames_authenticate(
        key in any::<[u8; 32]>(),
        seq in any::<u64>(),
        payload in prop::collection::vec(any::<u8>(), 0..MAX_PAYLOAD),
        flip in 0usize..FRAME_SIZE * 8,
    ) {
        let plain = PlainFrame { session_id: 7, seq, device: 1, operation: 1, status: 0, payload };
        let sealed = frame::seal(&key, Direction::ToSsv, &plain).unwrap();
        prop_assert_eq!(sealed.as_bytes().len(), FRAME_SIZE);
        prop_assert_eq!(&frame::open(&key, Direction::ToSsv, &sealed, seq).unwrap(), &plain);
        let replayed = frame::open(&key, Direction::ToSsv, &sealed, seq.wrapping_add(1));
        let is_replay = matches!(replayed, Err(ChannelError::ReplayOrReorder { .. }));
        prop_assert!(is_replay);
        prop_assert_eq!(frame::open(&key, Direction::FromSsv, &sealed, seq), Err(ChannelError::AuthFail));
        let mut bytes = sealed.as_bytes().to_vec();
        bytes[flip / 8] ^= 1 << (flip % 8);
        let tampered = SealedFrame::from_bytes(&bytes).unwrap();
        prop_assert!(frame::open(&key, Direction::ToSsv, &tampered, seq).is_err());
    }

    /// Checked accesses succeed exactly when the rules allow them and the range fits.
    #[test]
    fn access_follows_the_rule_table(
        actor in 0usize..5,
        domain in 0usize..5,
        mode in 0usize..4,
        offset in 0usize..300_000,
        len in 1usize..5000,
        write in any::<bool>(),
    ) {
        let actor = [Actor::Os, Actor::Adversary, Actor::Ssv, Actor::Enclave(1), Actor::Enclave(2)][actor];
        let domain = [DomainKind::Smram, DomainKind::Epc(1), DomainKind::Epc(2), DomainKind::SharedRam, DomainKind::UntrustedRam][domain];
        let mut p = Platform::new(PlatformConfig::default());
        p.create_enclave(1);
        p.create_enclave(2);
        match mode {
            0 => p.trigger_smi(SmiSource::Software).unwrap(),
            1 => p.set_context(Context::Os).unwrap(),
            k => p.set_context(Context::Enclave(k as u32 - 1)).unwrap(),
        }
        let mode: ExecutionMode = p.mode();
        let data = vec![0x5a; len];
        let op = if write { AccessOp::Write(&data) } else { AccessOp::Read(len) };
        let fits = offset + len <= p.domain_size(domain).unwrap();
        let r = p.access(actor, domain, offset, op);
        prop_assert_eq!(r.is_ok(), access_allowed(actor, domain, mode) && fits);
    }

    /// Honest clocks give non-decreasing, well-formed time whatever the gaps.
    #[test]
    fn honest_time_never_goes_backwards(gaps in prop::collection::vec(0u64..3_000_000_000, 1..40)) {
        let mut m = Machine::new(MachineConfig::default());
        let e = m.create_enclave(Machine::epid_from(1), true);
        let mut s = Session::establish(&mut m, e).unwrap();
        let mut ts = TimeService::new(&mut m, &mut s, TimeConfig::default()).unwrap();
        let spacing = m.platform.costs().timer_read;
        let mut vt = m.now();
        let mut last: Option<TimeValue> = None;
        for g in gaps {
            vt += g + 1;
            let now = ts.ingest(ClockSample::synthesize(&m.platform.clocks, vt, spacing));
            prop_assert!(now.verdict.ok, "{:?}", now.verdict);
            prop_assert!(now.value.tv_usec < 1_000_000);
            if let Some(l) = last {
                prop_assert!(now.value.as_micros() >= l.as_micros());
            }
            last = Some(now.value);
        }
    }

    #[test]
    fn time_value_micros_round_trip(us in -(1i128 << 60)..(1i128 << 60)) {
        let v = TimeValue::from_micros(us);
        prop_assert!(v.tv_usec < 1_000_000);
        prop_assert_eq!(v.as_micros(), us);
    }

    /// Rewriting the flow tag keeps the header checksum valid.
    #[test]
    fn tag_rewrite_keeps_header_valid(
        tag in any::<[u8; 4]>(),
        new in any::<[u8; 4]>(),
        data in prop::collection::vec(any::<u8>(), 0..600),
        ports in any::<(u16, u16)>(),
    ) {
        let (a, b) = (Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2));
        let mut f = udp_frame([2; 6], [4; 6], a, b, tag, ports, &data);
        prop_assert_eq!(ipv4_tag(&f), Some(tag));
        prop_assert!(rewrite_tag(&mut f, new));
        prop_assert_eq!(ipv4_tag(&f), Some(new));
        prop_assert_eq!(internet_checksum(&f[ETH_HDR..ETH_HDR + 24]), 0);
        let (h, body) = Ipv4Header::decode(&f[ETH_HDR..]).unwrap();
        let (u, got) = Udp::decode(h.src, h.dst, body).unwrap();
        prop_assert_eq!((u.src_port, u.dst_port), ports);
        prop_assert_eq!(got, &data[..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    /// Every sealed or injected frame is opened, dropped or still queued.
    #[test]
    fn frames_are_conserved_under_attack(script in 0usize..12, seed in any::<u64>()) {
        let script = &corpus::attacks()[script];
        let run = run_attack(script, seed);
        prop_assert!(run.conservation.holds(), "{}: {:?}", script.name, run.conservation);
    }

    #[test]
    fn frames_are_conserved_for_honest_mixes(reqs in prop::collection::vec((0u8..3, 1usize..9), 1..30)) {
        let mut m = Machine::new(MachineConfig::default());
        let e = m.create_enclave(Machine::epid_from(1), true);
        let mut s = Session::establish(&mut m, e).unwrap();
        for (kind, batch) in reqs {
            let mode = if kind == 0 { RequestMode::Batched(batch) } else { RequestMode::Immediate };
            let op = if kind == 2 { 9 } else { 1 };
            s.request_raw(&mut m, DeviceId::Clock.code(), op, &[], mode).unwrap();
        }
        prop_assert!(m.conservation().holds(), "{:?}", m.conservation());
        prop_assert!(m.ssv.hygiene.is_empty());
    }
}
