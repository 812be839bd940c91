//! Length-prefixed JSON framing shared by every service.
//!
//! A frame is a 4-byte big-endian length followed by that many bytes of
//! UTF-8 JSON.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

pub const MAX_FRAME_LEN: usize = 4 << 20;

pub fn encode_frame(payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + payload.len());
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    out
}

pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> io::Result<()> {
    if payload.len() > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "frame too large",
        ));
    }
    w.write_all(&encode_frame(payload))?;
    w.flush()
}

/// Returns `Ok(None)` on a clean end of stream before a length prefix.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME_LEN {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "frame too large",
        ));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<WireError>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
}

impl Response {
    pub fn success<T: Serialize>(result: &T) -> Self {
        Response {
            ok: true,
            error: None,
            result: Some(serde_json::to_value(result).expect("response serializes")),
        }
    }

    pub fn failure(code: &str, message: impl Into<String>) -> Self {
        Response {
            ok: false,
            error: Some(WireError {
                code: code.to_owned(),
                message: message.into(),
            }),
            result: None,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("response serializes")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        serde_json::from_slice(bytes).map_err(|e| WireError {
            code: "BadResponse".to_owned(),
            message: e.to_string(),
        })
    }

    /// Splits into the typed result or the carried error.
    pub fn into_result<T: for<'de> Deserialize<'de>>(self) -> Result<T, WireError> {
        if let Some(err) = self.error.filter(|_| !self.ok) {
            return Err(err);
        }
        if !self.ok {
            return Err(WireError {
                code: "BadResponse".to_owned(),
                message: "failure without error body".to_owned(),
            });
        }
        serde_json::from_value(self.result.unwrap_or(serde_json::Value::Null)).map_err(|e| {
            WireError {
                code: "BadResponse".to_owned(),
                message: e.to_string(),
            }
        })
    }
}

/// Decodes a request frame, or produces the `BadRequest` response to send back.
pub fn decode_request<T: for<'de> Deserialize<'de>>(frame: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(frame).map_err(|e| Response::failure("BadRequest", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, br#"{"op":"bundle"}"#).unwrap();
        write_frame(&mut buf, b"").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 15]);
        let mut r = buf.as_slice();
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), br#"{"op":"bundle"}"#);
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    #[test]
    fn truncated_and_oversized() {
        let mut r: &[u8] = &[0, 0, 0, 9, b'{'];
        assert!(read_frame(&mut r).is_err());
        let mut r: &[u8] = &[0xff, 0xff, 0xff, 0xff];
        assert!(read_frame(&mut r).is_err());
    }

    #[test]
    fn response_shape() {
        let ok = Response::success(&serde_json::json!({"x": 1}));
        assert_eq!(
            String::from_utf8(ok.to_bytes()).unwrap(),
            r#"{"ok":true,"result":{"x":1}}"#
        );
        let err = Response::failure("NoMatch", "no entry");
        assert_eq!(
            String::from_utf8(err.to_bytes()).unwrap(),
            r#"{"ok":false,"error":{"code":"NoMatch","message":"no entry"}}"#
        );
        assert_eq!(err.into_result::<()>().unwrap_err().code, "NoMatch");
    }
}
