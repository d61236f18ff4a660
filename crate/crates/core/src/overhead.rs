//! Analytical transport-overhead models and a brute-force packetizer.
//!
//! ```text
//! O_tcp(M)     = 2 * sum_i (I+T) * ceil(|m_i| / (MTU - (I+T)))
//! O_quic(M, s) = sum_i ceil(m_i / (MTU - (I+U+Qp+s*Qs))) * ((I+U+Qp)/s + Qs)
//! ```
//!
//! Arithmetic is exact (`Ratio<i128>`); `s` may be fractional.

use num_rational::Ratio;
use num_traits::Zero;
use serde::{Deserialize, Serialize};

pub type Q = Ratio<i128>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("message sizes must be positive")]
    EmptyMessage,
    #[error("observed overhead must be positive")]
    InvalidObservation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Quic,
}

impl std::str::FromStr for Transport {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tcp" => Ok(Transport::Tcp),
            "quic" => Ok(Transport::Quic),
            other => Err(format!("unknown transport {other:?} (expected tcp or quic)")),
        }
    }
}

impl std::fmt::Display for Transport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Transport::Tcp => "tcp",
            Transport::Quic => "quic",
        })
    }
}

/// Header and MTU constants. Defaults: I=20, T=32 (with timestamps),
/// U=8, Qp=11, Qs=4, MTU=1500, s=1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverheadParams {
    pub ip: u32,
    pub tcp: u32,
    pub udp: u32,
    pub quic_short: u32,
    pub quic_stream: u32,
    pub mtu: u32,
    #[serde(with = "ratio_serde")]
    pub streams: Q,
}

impl Default for OverheadParams {
    fn default() -> Self {
        Self { ip: 20, tcp: 32, udp: 8, quic_short: 11, quic_stream: 4, mtu: 1500, streams: Q::from_integer(1) }
    }
}

impl OverheadParams {
    /// Bytes of payload per TCP segment.
    pub fn tcp_room(&self) -> Result<i128, ModelError> {
        if !(20..=40).contains(&self.tcp) {
            return Err(ModelError::InvalidParams(format!("T={} outside 20..=40", self.tcp)));
        }
        let room = i128::from(self.mtu) - i128::from(self.ip + self.tcp);
        if room <= 0 {
            return Err(ModelError::InvalidParams(format!("MTU {} <= I+T", self.mtu)));
        }
        Ok(room)
    }

    /// Bytes of stream data per QUIC packet at `s` streams per packet.
    pub fn quic_room(&self, s: Q) -> Result<Q, ModelError> {
        if !(3..=11).contains(&self.quic_short) {
            return Err(ModelError::InvalidParams(format!("Qp={} outside 3..=11", self.quic_short)));
        }
        if s < Q::from_integer(1) {
            return Err(ModelError::InvalidParams(format!("s={s} below 1")));
        }
        let fixed = Q::from_integer(i128::from(self.ip + self.udp + self.quic_short));
        let room = Q::from_integer(i128::from(self.mtu)) - fixed - s * i128::from(self.quic_stream);
        if room <= Q::zero() {
            return Err(ModelError::InvalidParams(format!("MTU {} <= I+U+Qp+s*Qs", self.mtu)));
        }
        Ok(room)
    }

    fn quic_shared(&self) -> i128 {
        i128::from(self.ip + self.udp + self.quic_short)
    }
}

/// Exact model output with fixed-point rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Overhead(pub Q);

impl Overhead {
    pub fn exact(self) -> Q {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        to_f64(self.0)
    }

    /// Rounded-up whole bytes.
    pub fn ceil_bytes(self) -> u64 {
        self.0.ceil().to_integer().try_into().unwrap_or(u64::MAX)
    }

    /// Two-decimal rendering, rounded half away from zero.
    pub fn render(self) -> String {
        let cents = (self.0 * 100).round().to_integer();
        format!("{}.{:02}", cents / 100, (cents % 100).abs())
    }
}

impl std::fmt::Display for Overhead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.render())
    }
}

pub fn to_f64(q: Q) -> f64 {
    *q.numer() as f64 / *q.denom() as f64
}

fn check_sizes(messages: &[u64]) -> Result<(), ModelError> {
    if messages.contains(&0) {
        return Err(ModelError::EmptyMessage);
    }
    Ok(())
}

fn ceil_div(num: Q, den: Q) -> i128 {
    (num / den).ceil().to_integer()
}

pub fn o_tcp(messages: &[u64], p: &OverheadParams) -> Result<Overhead, ModelError> {
    check_sizes(messages)?;
    let room = p.tcp_room()?;
    let header = i128::from(p.ip + p.tcp);
    let packets: i128 = messages.iter().map(|&m| (i128::from(m) + room - 1) / room).sum();
    Ok(Overhead(Q::from_integer(2 * header * packets)))
}

pub fn o_quic(messages: &[u64], s: Q, p: &OverheadParams) -> Result<Overhead, ModelError> {
    check_sizes(messages)?;
    let room = p.quic_room(s)?;
    let per_packet = Q::from_integer(p.quic_shared()) / s + i128::from(p.quic_stream);
    let packets: i128 = messages.iter().map(|&m| ceil_div(Q::from_integer(i128::from(m)), room)).sum();
    Ok(Overhead(per_packet * packets))
}

pub fn predict(messages: &[u64], transport: Transport, p: &OverheadParams) -> Result<Overhead, ModelError> {
    match transport {
        Transport::Tcp => o_tcp(messages, p),
        Transport::Quic => o_quic(messages, p.streams, p),
    }
}

/// Literal packet-by-packet accounting. TCP: one segment per MSS-sized
/// chunk of each message plus one ACK per segment. QUIC: each message is cut
/// into `MTU-(I+U+Qp+s*Qs)` chunks and up to `s` chunks (from different
/// messages) share a packet. `s` must be a whole number here.
pub fn packetization_oracle(messages: &[u64], transport: Transport, p: &OverheadParams) -> Result<Overhead, ModelError> {
    check_sizes(messages)?;
    match transport {
        Transport::Tcp => {
            let room = p.tcp_room()? as u64;
            let header = u64::from(p.ip + p.tcp);
            let mut total: u64 = 0;
            for &m in messages {
                let mut left = m;
                while left > 0 {
                    left -= left.min(room);
                    total += header; // data segment
                    total += header; // its ACK
                }
            }
            Ok(Overhead(Q::from_integer(i128::from(total))))
        }
        Transport::Quic => {
            if !p.streams.is_integer() {
                return Err(ModelError::InvalidParams("oracle needs a whole number of streams per packet".into()));
            }
            let s = p.streams.to_integer() as u64;
            let room = p.quic_room(p.streams)?.to_integer() as u64;
            let shared = u64::from(p.ip + p.udp + p.quic_short);
            let frame = u64::from(p.quic_stream);
            let mut total: u64 = 0;
            let mut in_packet: u64 = 0;
            for &m in messages {
                let mut left = m;
                while left > 0 {
                    left -= left.min(room);
                    if in_packet == 0 {
                        total += shared;
                    }
                    total += frame;
                    in_packet += 1;
                    if in_packet == s {
                        in_packet = 0;
                    }
                }
            }
            Ok(Overhead(Q::from_integer(i128::from(total))))
        }
    }
}

/// `|predicted - observed| / observed * 100`.
pub fn model_error(predicted: f64, observed: f64) -> Result<f64, ModelError> {
    if observed <= 0.0 || !observed.is_finite() {
        return Err(ModelError::InvalidObservation);
    }
    Ok((predicted - observed).abs() / observed * 100.0)
}

/// Parses `"1"`, `"3/2"` or `"1.25"` into an exact ratio.
pub fn parse_ratio(text: &str) -> Result<Q, String> {
    let text = text.trim();
    if let Some((n, d)) = text.split_once('/') {
        let n: i128 = n.trim().parse().map_err(|e| format!("{text:?}: {e}"))?;
        let d: i128 = d.trim().parse().map_err(|e| format!("{text:?}: {e}"))?;
        if d == 0 {
            return Err(format!("{text:?}: zero denominator"));
        }
        return Ok(Q::new(n, d));
    }
    if let Some((whole, frac)) = text.split_once('.') {
        let scale = 10i128.checked_pow(frac.len() as u32).ok_or_else(|| format!("{text:?}: too many digits"))?;
        let digits: i128 = format!("{whole}{frac}").parse().map_err(|e| format!("{text:?}: {e}"))?;
        return Ok(Q::new(digits, scale));
    }
    text.parse::<i128>().map(Q::from_integer).map_err(|e| format!("{text:?}: {e}"))
}

mod ratio_serde {
    use super::Q;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(q: &Q, s: S) -> Result<S::Ok, S::Error> {
        if q.is_integer() {
            s.serialize_i64(q.to_integer() as i64)
        } else {
            s.serialize_f64(super::to_f64(*q))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Q, D::Error> {
        let v = serde_json::Number::deserialize(d)?;
        super::parse_ratio(&v.to_string()).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t20() -> OverheadParams {
        OverheadParams { tcp: 20, ..Default::default() }
    }

    #[test]
    fn tcp_hand_evaluated() {
        assert_eq!(o_tcp(&[1000], &t20()).unwrap().exact(), Q::from_integer(80));
        assert_eq!(o_tcp(&[], &t20()).unwrap().exact(), Q::from_integer(0));
        // ceil(3000/1460) = 3
        assert_eq!(o_tcp(&[3000], &t20()).unwrap().exact(), Q::from_integer(240));
        assert_eq!(packetization_oracle(&[3000], Transport::Tcp, &t20()).unwrap().exact(), Q::from_integer(240));
    }

    #[test]
    fn quic_hand_evaluated() {
        let p = OverheadParams::default();
        assert_eq!(o_quic(&[1000], Q::from_integer(1), &p).unwrap().exact(), Q::from_integer(43));
        assert_eq!(o_quic(&[], Q::from_integer(1), &p).unwrap().exact(), Q::from_integer(0));
        let two = o_quic(&[1000], Q::from_integer(2), &p).unwrap();
        assert_eq!(two.exact(), Q::new(47, 2));
        assert_eq!(two.render(), "23.50");
        assert_eq!(two.ceil_bytes(), 24);
    }

    #[test]
    fn invalid_params() {
        let p = OverheadParams { mtu: 52, ..Default::default() };
        assert!(matches!(o_tcp(&[1], &p), Err(ModelError::InvalidParams(_))));
        let p = OverheadParams { mtu: 43, ..Default::default() };
        assert!(matches!(o_quic(&[1], Q::from_integer(1), &p), Err(ModelError::InvalidParams(_))));
        let p = OverheadParams { tcp: 41, ..Default::default() };
        assert!(o_tcp(&[1], &p).is_err());
        let p = OverheadParams { quic_short: 2, ..Default::default() };
        assert!(o_quic(&[1], Q::from_integer(1), &p).is_err());
        assert!(o_quic(&[1], Q::new(1, 2), &OverheadParams::default()).is_err());
        assert_eq!(o_tcp(&[0], &t20()), Err(ModelError::EmptyMessage));
    }

    #[test]
    fn model_error_examples() {
        assert!((model_error(977.8, 1000.0).unwrap() - 2.22).abs() < 1e-9);
        assert_eq!(model_error(1000.0, 1000.0).unwrap(), 0.0);
        assert_eq!(model_error(1.0, 0.0), Err(ModelError::InvalidObservation));
    }

    #[test]
    fn render_rounds() {
        assert_eq!(Overhead(Q::new(1, 3)).render(), "0.33");
        assert_eq!(Overhead(Q::new(2, 3)).render(), "0.67");
        assert_eq!(Overhead(Q::from_integer(43)).render(), "43.00");
    }

    #[test]
    fn ratio_parsing() {
        assert_eq!(parse_ratio("3/2").unwrap(), Q::new(3, 2));
        assert_eq!(parse_ratio("1.25").unwrap(), Q::new(5, 4));
        assert_eq!(parse_ratio("2").unwrap(), Q::from_integer(2));
        assert!(parse_ratio("1/0").is_err());
    }

    // Raising s can push a message over a packet boundary, so O_quic is not
    // monotone in s everywhere.
    #[test]
    fn quic_not_monotone_at_packet_boundary() {
        let p = OverheadParams::default();
        let exact_fill = 1500 - 43;
        let s1 = o_quic(&[exact_fill], Q::from_integer(1), &p).unwrap();
        let s2 = o_quic(&[exact_fill], Q::from_integer(2), &p).unwrap();
        assert_eq!(s1.exact(), Q::from_integer(43));
        assert_eq!(s2.exact(), Q::from_integer(47));
    }

    fn params_strategy() -> impl Strategy<Value = (OverheadParams, i128)> {
        (20u32..=60, 20u32..=40, 3u32..=11, 576u32..=9000, 1i128..=8)
            .prop_flat_map(|(ip, tcp, qp, mtu, s)| {
                let max_qs = (tcp as i64 - 8 - qp as i64 - 1).clamp(1, 8) as u32;
                (Just((ip, tcp, qp, mtu, s)), 1u32..=max_qs)
            })
            .prop_filter("I+U+Qp+Qs < I+T", |((_, tcp, qp, _, _), qs)| 8 + qp + qs < *tcp)
            .prop_map(|((ip, tcp, qp, mtu, s), qs)| {
                (OverheadParams { ip, tcp, udp: 8, quic_short: qp, quic_stream: qs, mtu, streams: Q::from_integer(s) }, s)
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn closed_forms_match_oracle(msgs in proptest::collection::vec(1u64..=1_000_000, 1..=100), tcp in 20u32..=40) {
            let p = OverheadParams { tcp, ..Default::default() };
            prop_assert_eq!(o_tcp(&msgs, &p).unwrap(), packetization_oracle(&msgs, Transport::Tcp, &p).unwrap());
            prop_assert_eq!(
                o_quic(&msgs, Q::from_integer(1), &p).unwrap(),
                packetization_oracle(&msgs, Transport::Quic, &p).unwrap()
            );
        }

        #[test]
        fn oracle_within_one_packet_header_for_s(msgs in proptest::collection::vec(1u64..=100_000, 1..=50), s in 2i128..=8) {
            let p = OverheadParams { streams: Q::from_integer(s), ..Default::default() };
            let model = o_quic(&msgs, p.streams, &p).unwrap().exact();
            let oracle = packetization_oracle(&msgs, Transport::Quic, &p).unwrap().exact();
            let bound = Q::from_integer(i128::from(p.ip + p.udp + p.quic_short + p.quic_stream * s as u32));
            prop_assert!(oracle >= model);
            prop_assert!(oracle - model < bound);
        }

        #[test]
        fn quic_dominates_tcp(msgs in proptest::collection::vec(1u64..=1_000_000, 1..=20), (p, s) in params_strategy()) {
            let q = o_quic(&msgs, Q::from_integer(s), &p).unwrap();
            let t = o_tcp(&msgs, &p).unwrap();
            prop_assert!(q < t, "{} >= {} for {:?}", q, t, p);
        }

        // Monotone in s while the packet count per message is unchanged.
        #[test]
        fn quic_monotone_without_boundary_crossing(msgs in proptest::collection::vec(1u64..=1_400, 1..=20), s in 1i128..=7) {
            let p = OverheadParams::default();
            let (a, b) = (Q::from_integer(s), Q::from_integer(s + 1));
            let same_packets = msgs.iter().all(|&m| {
                let m = Q::from_integer(i128::from(m));
                ceil_div(m, p.quic_room(a).unwrap()) == ceil_div(m, p.quic_room(b).unwrap())
            });
            prop_assume!(same_packets);
            prop_assert!(o_quic(&msgs, b, &p).unwrap() <= o_quic(&msgs, a, &p).unwrap());
        }
    }
}
