//! JSON wire format.
//!
//! Responses are rendered by hand so the byte layout is stable: fixed key
//! order, percents always at five decimals. Clients that diff fixtures or
//! hash transcripts rely on this.
//!
//! Images travel as base64-encoded raw `f64` little-endian bytes, row-major,
//! with an optional `shape` field. Anything that fails to decode to exactly
//! 784 finite values is the caller's problem and is answered in-band with
//! code −9.

use atf_core::api::OracleResponse;
use atf_core::tensor::Tensor;
use atf_core::zoo::CATEGORIES;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::Deserialize;
use std::fmt::Write as _;

/// Renders a response to its canonical JSON bytes.
pub fn render_response(response: &OracleResponse) -> String {
    match response.error_code() {
        Some(code) => format!("{{\"request_id\":{},\"error\":{}}}", response.request_id, code),
        None => {
            let mut out = String::with_capacity(160);
            let _ = write!(out, "{{\"request_id\":{},\"categories\":{{", response.request_id);
            for (i, (name, percent)) in response.per_category().iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let _ = write!(out, "\"{}\":{:.5}", name, percent);
            }
            out.push_str("}}");
            out
        }
    }
}

/// Parses a rendered response back; used by the HTTP client.
pub fn parse_response(body: &str) -> Option<OracleResponse> {
    #[derive(Deserialize)]
    struct WireResponse {
        request_id: u64,
        #[serde(default)]
        error: Option<i32>,
        #[serde(default)]
        categories: Option<std::collections::BTreeMap<String, f64>>,
    }
    let wire: WireResponse = serde_json::from_str(body).ok()?;
    if let Some(code) = wire.error {
        return Some(OracleResponse::from_error(wire.request_id, code));
    }
    let map = wire.categories?;
    let mut scores = [0.0; 5];
    for (i, name) in CATEGORIES.iter().enumerate() {
        scores[i] = *map.get(*name)?;
    }
    Some(OracleResponse::from_scores(wire.request_id, scores))
}

pub fn encode_image(image: &Tensor) -> String {
    let mut bytes = Vec::with_capacity(image.len() * 8);
    for v in image.data() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    B64.encode(bytes)
}

/// Decodes base64 `f64` little-endian bytes. `None` on bad base64 or a byte
/// count that is not a multiple of 8; values are NOT validated here.
pub fn decode_image(text: &str) -> Option<Vec<f64>> {
    let bytes = B64.decode(text).ok()?;
    if bytes.len() % 8 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}

/// Classification request body. All fields optional so malformed requests
/// can be answered with the right in-band code instead of a parse failure.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyRequest {
    #[serde(default)]
    pub command: Option<String>,
    #[serde(default)]
    pub session: Option<u64>,
    #[serde(default)]
    pub image: Option<String>,
    #[serde(default)]
    pub shape: Option<Vec<usize>>,
    /// The real service accepted URLs once; this simulator never fetches,
    /// it only knows the error code for them.
    #[serde(default)]
    pub url: Option<String>,
}

/// Outcome of wire-level request vetting, before the service pipeline runs.
pub enum VettedRequest {
    /// Session id plus decoded (but unvalidated) pixels.
    Classify { session: u64, pixels: Vec<f64> },
    /// Answer immediately with this code.
    Reject(i32),
}

/// Applies the wire-level rules: JSON must parse (−26), the command must be
/// `classify` (−7), URL submissions are refused (−17), and the image field
/// must decode with a shape consistent with its length (−9).
pub fn vet_request(body: &str) -> VettedRequest {
    let req: ClassifyRequest = match serde_json::from_str(body) {
        Ok(r) => r,
        Err(_) => return VettedRequest::Reject(-26),
    };
    if let Some(cmd) = &req.command {
        if cmd != "classify" {
            return VettedRequest::Reject(-7);
        }
    }
    if req.url.is_some() {
        return VettedRequest::Reject(-17);
    }
    let Some(image) = &req.image else {
        return VettedRequest::Reject(-9);
    };
    let Some(pixels) = decode_image(image) else {
        return VettedRequest::Reject(-9);
    };
    if let Some(shape) = &req.shape {
        if shape.iter().product::<usize>() != pixels.len() {
            return VettedRequest::Reject(-9);
        }
    }
    VettedRequest::Classify {
        session: req.session.unwrap_or(0),
        pixels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rendering_is_byte_exact() {
        let r = OracleResponse::from_error(7, -25);
        assert_eq!(render_response(&r), "{\"request_id\":7,\"error\":-25}");
    }

    #[test]
    fn score_rendering_is_byte_exact_with_five_decimals() {
        let r = OracleResponse::from_scores(3, [99.99715, 0.0, 100.0, 0.00123, 42.5]);
        assert_eq!(
            render_response(&r),
            "{\"request_id\":3,\"categories\":{\"Terrorism\":99.99715,\"Weapons\":0.00000,\
             \"Pornography\":100.00000,\"Gore\":0.00123,\"Drugs\":42.50000}}"
        );
    }

    #[test]
    fn responses_round_trip_through_parse() {
        let r = OracleResponse::from_scores(9, [1.25, 0.0, 99.99999, 50.0, 0.00001]);
        assert_eq!(parse_response(&render_response(&r)), Some(r));
        let e = OracleResponse::from_error(2, -15);
        assert_eq!(parse_response(&render_response(&e)), Some(e));
    }

    #[test]
    fn images_round_trip_through_base64() {
        let img = Tensor::new(vec![0.0, 255.0, 13.5, 200.25], vec![4]).unwrap();
        let decoded = decode_image(&encode_image(&img)).unwrap();
        assert_eq!(decoded, img.data());
    }

    #[test]
    fn vetting_maps_each_malformation_to_its_code() {
        let reject = |body: &str| match vet_request(body) {
            VettedRequest::Reject(code) => code,
            VettedRequest::Classify { .. } => panic!("unexpectedly accepted: {body}"),
        };
        assert_eq!(reject("not json at all"), -26);
        assert_eq!(reject("{\"command\":\"transcode\",\"session\":1}"), -7);
        assert_eq!(
            reject("{\"session\":1,\"url\":\"http://example.com/cat.png\"}"),
            -17
        );
        assert_eq!(reject("{\"session\":1}"), -9);
        assert_eq!(reject("{\"session\":1,\"image\":\"!!!not-base64!!!\"}"), -9);
        // five bytes: valid base64, not a whole number of f64s
        assert_eq!(reject("{\"session\":1,\"image\":\"AAAAAAA=\"}"), -9);

        let img = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        let ok = format!(
            "{{\"command\":\"classify\",\"session\":4,\"image\":\"{}\",\"shape\":[2]}}",
            encode_image(&img)
        );
        match vet_request(&ok) {
            VettedRequest::Classify { session, pixels } => {
                assert_eq!(session, 4);
                assert_eq!(pixels, vec![1.0, 2.0]);
            }
            VettedRequest::Reject(code) => panic!("rejected with {code}"),
        }
        // shape inconsistent with payload length
        let bad_shape = format!(
            "{{\"session\":4,\"image\":\"{}\",\"shape\":[3]}}",
            encode_image(&img)
        );
        assert_eq!(reject(&bad_shape), -9);
    }
}
