//! Unified token vocabulary: command text tokens, offset-mapped image codes,
//! and structural specials, with disjoint id ranges.

use serde_json::json;
use uwm_world::Command;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenKind {
    Text,
    Image,
    Bos,
    Plan,
    ImgStart,
    ImgEnd,
    Pad,
}

/// Id layout: `[0, n_text)` text, `[n_text, n_text + n_img)` image codes,
/// then the five specials.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub n_text: usize,
    pub n_img: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Vocab {
            n_text: 16,
            n_img: 256,
        }
    }
}

impl Vocab {
    pub fn new(n_text: usize, n_img: usize) -> Self {
        assert!(n_text >= Command::COUNT && n_img >= 2);
        Vocab { n_text, n_img }
    }

    pub fn size(&self) -> usize {
        self.n_text + self.n_img + 5
    }

    pub fn image_base(&self) -> usize {
        self.n_text
    }

    pub fn bos(&self) -> usize {
        self.n_text + self.n_img
    }

    pub fn plan(&self) -> usize {
        self.bos() + 1
    }

    pub fn img_start(&self) -> usize {
        self.bos() + 2
    }

    pub fn img_end(&self) -> usize {
        self.bos() + 3
    }

    pub fn pad(&self) -> usize {
        self.bos() + 4
    }

    pub fn command_token(&self, cmd: Command) -> usize {
        cmd.index()
    }

    pub fn command_of(&self, tok: usize) -> Option<Command> {
        Command::from_index(tok)
    }

    pub fn image_token(&self, code: usize) -> usize {
        assert!(code < self.n_img, "code {code} >= {}", self.n_img);
        self.image_base() + code
    }

    pub fn code_of(&self, tok: usize) -> Option<usize> {
        (tok >= self.image_base() && tok < self.bos()).then(|| tok - self.image_base())
    }

    pub fn kind(&self, tok: usize) -> Option<TokenKind> {
        if tok < self.n_text {
            Some(TokenKind::Text)
        } else if tok < self.bos() {
            Some(TokenKind::Image)
        } else if tok == self.bos() {
            Some(TokenKind::Bos)
        } else if tok == self.plan() {
            Some(TokenKind::Plan)
        } else if tok == self.img_start() {
            Some(TokenKind::ImgStart)
        } else if tok == self.img_end() {
            Some(TokenKind::ImgEnd)
        } else if tok == self.pad() {
            Some(TokenKind::Pad)
        } else {
            None
        }
    }

    /// Full id table for external tooling: one entry per id with its kind
    /// and payload (command name or image code).
    pub fn table_json(&self) -> serde_json::Value {
        let entries: Vec<serde_json::Value> = (0..self.size())
            .map(|id| match self.kind(id).unwrap() {
                TokenKind::Text => {
                    let payload = self
                        .command_of(id)
                        .map(|c| format!("{c:?}").to_lowercase())
                        .unwrap_or_else(|| "reserved".to_string());
                    json!({"id": id, "kind": "text", "payload": payload})
                }
                TokenKind::Image => {
                    json!({"id": id, "kind": "image", "payload": id - self.image_base()})
                }
                TokenKind::Bos => json!({"id": id, "kind": "bos"}),
                TokenKind::Plan => json!({"id": id, "kind": "plan"}),
                TokenKind::ImgStart => json!({"id": id, "kind": "image_start"}),
                TokenKind::ImgEnd => json!({"id": id, "kind": "image_end"}),
                TokenKind::Pad => json!({"id": id, "kind": "pad"}),
            })
            .collect();
        json!({"size": self.size(), "n_text": self.n_text, "n_img": self.n_img, "tokens": entries})
    }
}
