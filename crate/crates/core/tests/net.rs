use std::net::Ipv4Addr;

use aurora::net::wire::{eth_parse, Arp, ETHERTYPE_ARP};
use aurora::net::{NetError, Network, Protocol, RxMode, StackConfig, TcpState};
use aurora::{Machine, MachineConfig};
use sha2::{Digest, Sha256};

const A: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 1);
const B: Ipv4Addr = Ipv4Addr::new(10, 0, 0, 2);

fn machine(seed: u64) -> Machine {
    let mut cfg = MachineConfig { seed, ..MachineConfig::default() };
    cfg.platform.capture_fabric = true;
    Machine::new(cfg)
}

fn pair(m: &mut Machine, mode: RxMode) -> Network {
    let mut net = Network::new();
    net.spawn(m, 1, A, mode).unwrap();
    net.spawn(m, 2, B, mode).unwrap();
    net
}

#[test]
fn distinct_flow_tags_registered() {
    let mut m = machine(1);
    let net = pair(&mut m, RxMode::Notify);
    assert_ne!(net.stacks[0].flow_tag, net.stacks[1].flow_tag);
    assert_eq!(m.ssv.flows.len(), 2);
}

#[test]
fn init_announces_address_on_fabric() {
    let mut m = machine(2);
    let mut net = Network::new();
    let s = net.spawn(&mut m, 1, A, RxMode::Notify).unwrap();
    let announce = m
        .platform
        .fabric
        .captured()
        .iter()
        .filter_map(|f| eth_parse(&f.bytes).filter(|(h, _)| h.ethertype == ETHERTYPE_ARP).and_then(|(_, b)| Arp::decode(b)))
        .find(|a| a.spa == A && a.tpa == A)
        .expect("gratuitous ARP on the wire");
    assert_eq!(announce.sha, net.stacks[s].mac);
    // It went out as a sealed NIC write.
    assert_eq!(net.stacks[s].stats.tx_frames, 1);
}

#[test]
fn icmp_echo_three_probes() {
    let mut m = machine(3);
    let mut net = pair(&mut m, RxMode::Notify);
    let payload: Vec<u8> = (0..56u8).collect();
    let probes = net.icmp_echo(&mut m, 0, B, &payload, 3);
    assert_eq!(probes.len(), 3);
    for (i, p) in probes.into_iter().enumerate() {
        let p = p.unwrap();
        assert_eq!(p.seq as usize, i);
        assert_eq!(p.data, payload);
        assert!(p.rtt_ns > 0);
    }
}

#[test]
fn echo_rtt_is_the_sum_of_recorded_costs() {
    let mut m = machine(4);
    let mut net = pair(&mut m, RxMode::Notify);
    let probes = net.icmp_echo(&mut m, 0, B, &[7; 32], 2);
    let p = probes[1].as_ref().unwrap();
    let end = p.sent_at + p.rtt_ns;
    let steps: Vec<_> = m.platform.steps().iter().filter(|s| s.vt_ns >= p.sent_at && s.vt_ns < end).collect();
    let total: u64 = steps.iter().map(|s| s.cost_ns).sum();
    assert_eq!(total, p.rtt_ns);
    // Request out, reply back: two NIC writes and two RX scans.
    let c = m.platform.costs().clone();
    assert_eq!(steps.iter().filter(|s| s.label == "Switch to SMM").count(), 4);
    assert_eq!(steps.iter().filter(|s| s.label == "RX scan").count(), 2);
    assert!(steps.iter().filter(|s| s.label == "Network Service").all(|s| s.cost_ns >= c.nic_context_save_restore + c.nic_transmit));
}

#[test]
fn udp_echo_round_trips() {
    let mut m = machine(5);
    let mut net = pair(&mut m, RxMode::Notify);
    let srv = net.socket(1, Protocol::Udp);
    net.bind(1, srv, 7).unwrap();
    let cli = net.socket(0, Protocol::Udp);
    for i in 0..200u32 {
        let msg: Vec<u8> = (0..(i % 300 + 1)).map(|k| (k ^ i) as u8).collect();
        net.sendto(&mut m, 0, cli, (B, 7), &msg).unwrap();
        let (from, got) = net.recvfrom(&mut m, 1, srv).unwrap();
        assert_eq!(got, msg);
        net.sendto(&mut m, 1, srv, from, &got).unwrap();
        let (_, back) = net.recvfrom(&mut m, 0, cli).unwrap();
        assert_eq!(back, msg);
    }
}

#[test]
fn large_udp_datagram_is_fragmented_and_reassembled() {
    let mut m = machine(6);
    let mut net = pair(&mut m, RxMode::Poll);
    let srv = net.socket(1, Protocol::Udp);
    net.bind(1, srv, 9).unwrap();
    let cli = net.socket(0, Protocol::Udp);
    let msg: Vec<u8> = (0..5000u32).map(|k| (k * 7) as u8).collect();
    net.sendto(&mut m, 0, cli, (B, 9), &msg).unwrap();
    let (_, got) = net.recvfrom(&mut m, 1, srv).unwrap();
    assert_eq!(got, msg);
    assert!(net.stacks[0].stats.fragments_tx >= 4);
    assert_eq!(net.stacks[1].stats.reassembled, 1);
}

fn tcp_transfer(m: &mut Machine, net: &mut Network, data: &[u8]) -> (Vec<u8>, Vec<TcpState>, Vec<TcpState>) {
    let l = net.socket(1, Protocol::Tcp);
    net.bind(1, l, 80).unwrap();
    net.listen(1, l).unwrap();
    let c = net.socket(0, Protocol::Tcp);
    net.connect(m, 0, c, (B, 80)).unwrap();
    let srv = net.accept(m, 1, l).unwrap();
    net.send(m, 0, c, data).unwrap();
    net.close(m, 0, c).unwrap();
    let got = net.recv_to_end(m, 1, srv).unwrap();
    net.close(m, 1, srv).unwrap();
    net.run_until(m, |n, _| Ok(n.stacks[1].handle(srv).unwrap().state.filter(|s| *s == TcpState::Closed).map(|_| ())))
        .unwrap();
    (got, net.stacks[0].tcp_history(c), net.stacks[1].tcp_history(srv))
}

#[test]
fn tcp_one_mebibyte_transfer() {
    let mut m = machine(7);
    let mut net = pair(&mut m, RxMode::Notify);
    let data: Vec<u8> = (0..1u32 << 20).map(|i| (i.wrapping_mul(2654435761) >> 13) as u8).collect();
    let (got, client, server) = tcp_transfer(&mut m, &mut net, &data);
    assert_eq!(Sha256::digest(&got), Sha256::digest(&data));
    assert_eq!(&client[..3], &[TcpState::Closed, TcpState::SynSent, TcpState::Established]);
    assert_eq!(&server[..3], &[TcpState::Listen, TcpState::SynRcvd, TcpState::Established]);
    assert_eq!(server[3..], [TcpState::CloseWait, TcpState::LastAck, TcpState::Closed]);
    assert!(client.contains(&TcpState::FinWait1) && client.contains(&TcpState::TimeWait));
    assert!(m.conservation().holds());
    assert!(m.ssv.hygiene.is_empty());
}

#[test]
fn connect_to_closed_port_is_refused() {
    let mut m = machine(8);
    let mut net = pair(&mut m, RxMode::Notify);
    let c = net.socket(0, Protocol::Tcp);
    assert_eq!(net.connect(&mut m, 0, c, (B, 81)), Err(NetError::ConnRefused));
    assert_eq!(net.stacks[1].stats.tcp_rst_tx, 1);
}

#[test]
fn notify_and_poll_deliver_the_same_frames() {
    let run = |mode| {
        let mut m = machine(9);
        let mut net = Network::new();
        for (n, ip) in [(1, A), (2, B)] {
            let cfg = StackConfig { ip, rx_mode: mode, record_rx: true, ..StackConfig::default() };
            net.spawn_with(&mut m, n, cfg).unwrap();
        }
        let srv = net.socket(1, Protocol::Udp);
        net.bind(1, srv, 7).unwrap();
        let cli = net.socket(0, Protocol::Udp);
        for i in 0..20u8 {
            net.sendto(&mut m, 0, cli, (B, 7), &[i; 40]).unwrap();
            net.recvfrom(&mut m, 1, srv).unwrap();
        }
        let polls = net.stacks[0].stats.empty_polls;
        (net.stacks[0].rx_log.clone(), net.stacks[1].rx_log.clone(), polls)
    };
    let (a1, b1, _) = run(RxMode::Notify);
    let (a2, b2, empty) = run(RxMode::Poll);
    assert_eq!(a1, a2);
    assert_eq!(b1, b2);
    assert!(empty > 0);
}

#[test]
fn corrupted_sibling_cannot_disturb_a_transfer() {
    let mut m = machine(10);
    let mut net = pair(&mut m, RxMode::Notify);
    net.spawn(&mut m, 3, Ipv4Addr::new(10, 0, 0, 3), RxMode::Notify).unwrap();
    // The sibling has a live connection of its own, then gets scrambled.
    let l = net.socket(1, Protocol::Tcp);
    net.bind(1, l, 90).unwrap();
    net.listen(1, l).unwrap();
    let c = net.socket(2, Protocol::Tcp);
    net.connect(&mut m, 2, c, (B, 90)).unwrap();
    net.send(&mut m, 2, c, &[1; 10_000]).unwrap();
    net.stacks[2].corrupt_pcbs(0xbad);
    let data: Vec<u8> = (0..200_000u32).map(|i| (i % 253) as u8).collect();
    let (got, _, _) = tcp_transfer(&mut m, &mut net, &data);
    assert_eq!(Sha256::digest(&got), Sha256::digest(&data));
}
