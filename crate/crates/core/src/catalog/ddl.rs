//! Lexer and recursive-descent parser for the feed DDL.
//!
//! Accepted statement forms (keywords are case-insensitive):
//!
//! ```text
//! create type T as open { f: string, g: double?, h: {{string}}, u: OtherType };
//! create nodegroup G on A, B;
//! create dataset D(T) primary key f [on G];
//! create index I on D(f) [type btree|hash|rtree];
//! create feed F using Adaptor ("k"="v", "n"=60) [apply function fn[(args)]];
//! create secondary feed F2 from feed F [apply function fn[(args)]];
//! create policy P from policy Basic set (("excess.records.spill","false"));
//! connect feed F to dataset D [using policy P];
//! disconnect feed F from dataset D;
//! show catalog;  show pipelines;
//! ```

use std::fmt;

use thiserror::Error;

use crate::cluster::NodeId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DdlError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax { line: usize, column: usize, message: String },
    #[error("unknown statement form at line {line}, column {column}: `{found}`")]
    UnknownStatement { line: usize, column: usize, found: String },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KindDecl {
    String,
    Int,
    Double,
    Point,
    Datetime,
    StringBag,
    Named(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldDecl {
    pub name: String,
    pub kind: KindDecl,
    pub optional: bool,
}

/// A function reference such as `addHashTags` or `failEvery(3)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct UdfRef {
    pub name: String,
    pub args: Vec<i64>,
}

impl UdfRef {
    pub fn named(name: impl Into<String>) -> Self {
        UdfRef { name: name.into(), args: Vec::new() }
    }
}

impl fmt::Display for UdfRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        if !self.args.is_empty() {
            let args: Vec<String> = self.args.iter().map(|a| a.to_string()).collect();
            write!(f, "({})", args.join(","))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShowTarget {
    Catalog,
    Pipelines,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Statement {
    CreateType { name: String, open: bool, fields: Vec<FieldDecl> },
    CreateNodegroup { name: String, nodes: Vec<NodeId> },
    CreateDataset { name: String, type_name: String, primary_key: String, nodegroup: Option<String> },
    CreateIndex { name: String, dataset: String, field: String, kind: String },
    CreateFeed { name: String, adaptor: String, config: Vec<(String, String)>, udf: Option<UdfRef> },
    CreateSecondaryFeed { name: String, parent: String, udf: Option<UdfRef> },
    CreatePolicy { name: String, base: String, overrides: Vec<(String, String)> },
    Connect { feed: String, dataset: String, policy: Option<String> },
    Disconnect { feed: String, dataset: String },
    Show(ShowTarget),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Str(String),
    Int(i64),
    Num(String),
    Punct(char),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) => write!(f, "{s}"),
            Tok::Str(s) => write!(f, "\"{s}\""),
            Tok::Int(i) => write!(f, "{i}"),
            Tok::Num(n) => write!(f, "{n}"),
            Tok::Punct(c) => write!(f, "{c}"),
            Tok::Eof => write!(f, "end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    column: usize,
}

fn lex(text: &str) -> Result<Vec<Token>, DdlError> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1usize, 1usize);
    let advance = |i: &mut usize, line: &mut usize, col: &mut usize, c: char| {
        *i += 1;
        if c == '\n' {
            *line += 1;
            *col = 1;
        } else {
            *col += 1;
        }
    };
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            advance(&mut i, &mut line, &mut col, c);
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'/') {
            while i < chars.len() && chars[i] != '\n' {
                { let ch = chars[i]; advance(&mut i, &mut line, &mut col, ch); }
            }
            continue;
        }
        if c == '/' && chars.get(i + 1) == Some(&'*') {
            let (sl, sc) = (line, col);
            advance(&mut i, &mut line, &mut col, '/');
            advance(&mut i, &mut line, &mut col, '*');
            loop {
                if i >= chars.len() {
                    return Err(DdlError::Syntax { line: sl, column: sc, message: "unterminated comment".into() });
                }
                if chars[i] == '*' && chars.get(i + 1) == Some(&'/') {
                    advance(&mut i, &mut line, &mut col, '*');
                    advance(&mut i, &mut line, &mut col, '/');
                    break;
                }
                { let ch = chars[i]; advance(&mut i, &mut line, &mut col, ch); }
            }
            continue;
        }
        let (tl, tc) = (line, col);
        if c.is_ascii_alphabetic() || c == '_' {
            let mut s = String::new();
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_' || chars[i] == '-') {
                s.push(chars[i]);
                { let ch = chars[i]; advance(&mut i, &mut line, &mut col, ch); }
            }
            out.push(Token { tok: Tok::Ident(s), line: tl, column: tc });
        } else if c.is_ascii_digit() || (c == '-' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let mut s = String::new();
            s.push(c);
            advance(&mut i, &mut line, &mut col, c);
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.') {
                s.push(chars[i]);
                { let ch = chars[i]; advance(&mut i, &mut line, &mut col, ch); }
            }
            let tok = match s.parse::<i64>() {
                Ok(v) => Tok::Int(v),
                Err(_) => Tok::Num(s),
            };
            out.push(Token { tok, line: tl, column: tc });
        } else if c == '"' || c == '\'' {
            let quote = c;
            advance(&mut i, &mut line, &mut col, c);
            let mut s = String::new();
            loop {
                match chars.get(i) {
                    None => {
                        return Err(DdlError::Syntax { line: tl, column: tc, message: "unterminated string literal".into() })
                    }
                    Some(&ch) if ch == quote => {
                        advance(&mut i, &mut line, &mut col, ch);
                        break;
                    }
                    Some(&'\\') if i + 1 < chars.len() => {
                        advance(&mut i, &mut line, &mut col, '\\');
                        let e = chars[i];
                        s.push(match e {
                            'n' => '\n',
                            't' => '\t',
                            other => other,
                        });
                        advance(&mut i, &mut line, &mut col, e);
                    }
                    Some(&ch) => {
                        s.push(ch);
                        advance(&mut i, &mut line, &mut col, ch);
                    }
                }
            }
            out.push(Token { tok: Tok::Str(s), line: tl, column: tc });
        } else if "(){},;=?:.".contains(c) {
            out.push(Token { tok: Tok::Punct(c), line: tl, column: tc });
            advance(&mut i, &mut line, &mut col, c);
        } else {
            return Err(DdlError::Syntax { line: tl, column: tc, message: format!("unexpected character `{c}`") });
        }
    }
    out.push(Token { tok: Tok::Eof, line, column: col });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err_at(&self, t: &Token, message: impl Into<String>) -> DdlError {
        DdlError::Syntax { line: t.line, column: t.column, message: message.into() }
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(&self.peek().tok, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), DdlError> {
        if self.is_kw(kw) {
            self.next();
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.err_at(&t, format!("expected `{kw}`, found `{}`", t.tok)))
        }
    }

    fn punct(&mut self, p: char) -> Result<(), DdlError> {
        if self.peek().tok == Tok::Punct(p) {
            self.next();
            Ok(())
        } else {
            let t = self.peek().clone();
            Err(self.err_at(&t, format!("expected `{p}`, found `{}`", t.tok)))
        }
    }

    fn eat_punct(&mut self, p: char) -> bool {
        if self.peek().tok == Tok::Punct(p) {
            self.next();
            true
        } else {
            false
        }
    }

    fn ident(&mut self) -> Result<String, DdlError> {
        let t = self.next();
        match t.tok.clone() {
            Tok::Ident(s) => Ok(s),
            other => Err(self.err_at(&t, format!("expected identifier, found `{other}`"))),
        }
    }

    fn string(&mut self) -> Result<String, DdlError> {
        let t = self.next();
        match t.tok.clone() {
            Tok::Str(s) => Ok(s),
            other => Err(self.err_at(&t, format!("expected string literal, found `{other}`"))),
        }
    }

    /// A configuration value: string, number or bare identifier.
    fn value(&mut self) -> Result<String, DdlError> {
        let t = self.next();
        match t.tok.clone() {
            Tok::Str(s) | Tok::Ident(s) | Tok::Num(s) => Ok(s),
            Tok::Int(i) => Ok(i.to_string()),
            other => Err(self.err_at(&t, format!("expected value, found `{other}`"))),
        }
    }

    fn statement(&mut self) -> Result<Statement, DdlError> {
        let start = self.peek().clone();
        let unknown = |t: &Token| DdlError::UnknownStatement { line: t.line, column: t.column, found: t.tok.to_string() };
        let stmt = if self.is_kw("create") {
            self.next();
            let what = self.peek().clone();
            if self.is_kw("type") {
                self.next();
                self.create_type()?
            } else if self.is_kw("nodegroup") {
                self.next();
                self.create_nodegroup()?
            } else if self.is_kw("dataset") {
                self.next();
                self.create_dataset()?
            } else if self.is_kw("index") {
                self.next();
                self.create_index()?
            } else if self.is_kw("feed") {
                self.next();
                self.create_feed()?
            } else if self.is_kw("secondary") {
                self.next();
                self.keyword("feed")?;
                self.create_secondary_feed()?
            } else if self.is_kw("policy") {
                self.next();
                self.create_policy()?
            } else {
                return Err(unknown(&what));
            }
        } else if self.is_kw("connect") {
            self.next();
            self.keyword("feed")?;
            let feed = self.ident()?;
            self.keyword("to")?;
            self.keyword("dataset")?;
            let dataset = self.ident()?;
            let policy = if self.is_kw("using") {
                self.next();
                self.keyword("policy")?;
                Some(self.ident()?)
            } else {
                None
            };
            Statement::Connect { feed, dataset, policy }
        } else if self.is_kw("disconnect") {
            self.next();
            self.keyword("feed")?;
            let feed = self.ident()?;
            self.keyword("from")?;
            self.keyword("dataset")?;
            let dataset = self.ident()?;
            Statement::Disconnect { feed, dataset }
        } else if self.is_kw("show") {
            self.next();
            if self.is_kw("catalog") {
                self.next();
                Statement::Show(ShowTarget::Catalog)
            } else if self.is_kw("pipelines") {
                self.next();
                Statement::Show(ShowTarget::Pipelines)
            } else {
                let t = self.peek().clone();
                return Err(unknown(&t));
            }
        } else {
            return Err(unknown(&start));
        };
        self.punct(';')?;
        Ok(stmt)
    }

    fn create_type(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("as")?;
        let open = if self.is_kw("open") {
            self.next();
            true
        } else if self.is_kw("closed") {
            let t = self.next();
            return Err(self.err_at(&t, "closed types are not supported; declare the type `as open`"));
        } else {
            true
        };
        self.punct('{')?;
        let mut fields = Vec::new();
        if !self.eat_punct('}') {
            loop {
                let fname = self.ident()?;
                self.punct(':')?;
                let kind = self.kind()?;
                let optional = self.eat_punct('?');
                fields.push(FieldDecl { name: fname, kind, optional });
                if self.eat_punct(',') {
                    continue;
                }
                self.punct('}')?;
                break;
            }
        }
        Ok(Statement::CreateType { name, open, fields })
    }

    fn kind(&mut self) -> Result<KindDecl, DdlError> {
        if self.eat_punct('{') {
            self.punct('{')?;
            let t = self.peek().clone();
            let inner = self.ident()?;
            if !inner.eq_ignore_ascii_case("string") {
                return Err(self.err_at(&t, "only {{string}} bags are supported"));
            }
            self.punct('}')?;
            self.punct('}')?;
            return Ok(KindDecl::StringBag);
        }
        let t = self.peek().clone();
        let name = self.ident()?;
        Ok(match name.to_ascii_lowercase().as_str() {
            "string" => KindDecl::String,
            "int" | "int8" | "int16" | "int32" | "int64" => KindDecl::Int,
            "double" | "float" => KindDecl::Double,
            "point" => KindDecl::Point,
            "datetime" => KindDecl::Datetime,
            _ if name.chars().next().is_some_and(|c| c.is_ascii_uppercase()) => KindDecl::Named(name),
            _ => return Err(self.err_at(&t, format!("unknown field kind `{name}`"))),
        })
    }

    fn create_nodegroup(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("on")?;
        let mut nodes = Vec::new();
        loop {
            let t = self.peek().clone();
            let n = self.ident()?;
            nodes.push(n.parse::<NodeId>().map_err(|e| self.err_at(&t, e.to_string()))?);
            if !self.eat_punct(',') {
                break;
            }
        }
        Ok(Statement::CreateNodegroup { name, nodes })
    }

    fn create_dataset(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.punct('(')?;
        let type_name = self.ident()?;
        self.punct(')')?;
        self.keyword("primary")?;
        self.keyword("key")?;
        let primary_key = self.ident()?;
        let nodegroup = if self.is_kw("on") {
            self.next();
            Some(self.ident()?)
        } else {
            None
        };
        Ok(Statement::CreateDataset { name, type_name, primary_key, nodegroup })
    }

    fn create_index(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("on")?;
        let dataset = self.ident()?;
        self.punct('(')?;
        let field = self.ident()?;
        self.punct(')')?;
        let kind = if self.is_kw("type") {
            self.next();
            self.ident()?.to_ascii_lowercase()
        } else {
            "btree".to_string()
        };
        Ok(Statement::CreateIndex { name, dataset, field, kind })
    }

    fn udf_clause(&mut self) -> Result<Option<UdfRef>, DdlError> {
        if !self.is_kw("apply") {
            return Ok(None);
        }
        self.next();
        self.keyword("function")?;
        let name = self.ident()?;
        let mut args = Vec::new();
        if self.eat_punct('(')
            && !self.eat_punct(')') {
                loop {
                    let t = self.next();
                    match t.tok.clone() {
                        Tok::Int(v) => args.push(v),
                        other => return Err(self.err_at(&t, format!("expected integer argument, found `{other}`"))),
                    }
                    if self.eat_punct(',') {
                        continue;
                    }
                    self.punct(')')?;
                    break;
                }
            }
        Ok(Some(UdfRef { name, args }))
    }

    fn create_feed(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("using")?;
        let adaptor = self.ident()?;
        let mut config = Vec::new();
        if self.eat_punct('(')
            && !self.eat_punct(')') {
                loop {
                    let key = self.string()?;
                    self.punct('=')?;
                    let value = self.value()?;
                    config.push((key, value));
                    if self.eat_punct(',') {
                        continue;
                    }
                    self.punct(')')?;
                    break;
                }
            }
        let udf = self.udf_clause()?;
        Ok(Statement::CreateFeed { name, adaptor, config, udf })
    }

    fn create_secondary_feed(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("from")?;
        self.keyword("feed")?;
        let parent = self.ident()?;
        let udf = self.udf_clause()?;
        Ok(Statement::CreateSecondaryFeed { name, parent, udf })
    }

    fn create_policy(&mut self) -> Result<Statement, DdlError> {
        let name = self.ident()?;
        self.keyword("from")?;
        self.keyword("policy")?;
        let base = self.ident()?;
        let mut overrides = Vec::new();
        if self.is_kw("set") {
            self.next();
            self.punct('(')?;
            loop {
                self.punct('(')?;
                let key = self.string()?;
                self.punct(',')?;
                let value = self.value()?;
                self.punct(')')?;
                overrides.push((key, value));
                if self.eat_punct(',') {
                    continue;
                }
                self.punct(')')?;
                break;
            }
        }
        Ok(Statement::CreatePolicy { name, base, overrides })
    }
}

/// Parses exactly one statement terminated by `;`.
pub fn parse_statement(text: &str) -> Result<Statement, DdlError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let stmt = p.statement()?;
    let t = p.peek().clone();
    if t.tok != Tok::Eof {
        return Err(p.err_at(&t, format!("unexpected `{}` after end of statement", t.tok)));
    }
    Ok(stmt)
}

/// Parses a script of zero or more statements.
pub fn parse_script(text: &str) -> Result<Vec<Statement>, DdlError> {
    let mut p = Parser { toks: lex(text)?, pos: 0 };
    let mut out = Vec::new();
    while p.peek().tok != Tok::Eof {
        out.push(p.statement()?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primary_feed_with_one_config_pair() {
        let s = parse_statement(r#"create feed TweetGenFeed using TweetGenAdaptor ("datasource"="10.1.0.1:9000");"#).unwrap();
        assert_eq!(
            s,
            Statement::CreateFeed {
                name: "TweetGenFeed".into(),
                adaptor: "TweetGenAdaptor".into(),
                config: vec![("datasource".into(), "10.1.0.1:9000".into())],
                udf: None,
            }
        );
    }

    #[test]
    fn connect_without_policy_clause() {
        let s = parse_statement("connect feed F to dataset D;").unwrap();
        assert_eq!(s, Statement::Connect { feed: "F".into(), dataset: "D".into(), policy: None });
        let s = parse_statement("connect feed TwitterFeed to dataset RawTweets\nusing policy Basic;").unwrap();
        assert_eq!(s, Statement::Connect { feed: "TwitterFeed".into(), dataset: "RawTweets".into(), policy: Some("Basic".into()) });
    }

    #[test]
    fn policy_derivation_overrides_one_key() {
        let s = parse_statement(r#"create policy P from policy Basic set (("excess.records.spill","false"));"#).unwrap();
        assert_eq!(
            s,
            Statement::CreatePolicy {
                name: "P".into(),
                base: "Basic".into(),
                overrides: vec![("excess.records.spill".into(), "false".into())],
            }
        );
    }

    #[test]
    fn sample_statements_parse() {
        let script = r#"
            create type TwitterUser as open {
               screen-name: string, lang: string, friends_count: int32,
               statuses_count: int32, name: string, followers_count: int32
            };
            create type RawTweet as open {
               tweetId: string, user: TwitterUser, location-lat: double?,
               location-long: double?, send-time: string, message-text: string
            };
            create type ProcessedTweet as open {
               tweetId: string, userId: string, sender-location: point?,
               send-time: datetime, message-text: string, referred-topics: {{string}}
            };
            create dataset RawTweets(RawTweet) primary key tweetId;
            create index locationIndex on RawTweets(location-lat) type rtree;
            create feed TwitterFeed using TwitterAdaptor ("api"="pull", "query"="Obama", "interval"=60);
            create feed ProcessedTwitterFeed using TwitterAdaptor ("api"="pull", "query"="Obama", "interval"=60)
            apply function addHashTags;
            create secondary feed ProcessedCNNFeed from feed CNNFeed apply function extractInfo;
            disconnect feed ProcessedTwitterFeed from dataset ProcessedTweets;
            create feed Poisoned using TweetGenAdaptor ("datasource"="sim:0") apply function failEvery(3);
            show pipelines;
        "#;
        let stmts = parse_script(script).unwrap();
        assert_eq!(stmts.len(), 11);
        match &stmts[2] {
            Statement::CreateType { fields, .. } => {
                assert_eq!(fields[5].kind, KindDecl::StringBag);
                assert!(fields[2].optional);
            }
            other => panic!("unexpected {other:?}"),
        }
        match &stmts[5] {
            Statement::CreateFeed { config, .. } => assert_eq!(config[2], ("interval".into(), "60".into())),
            other => panic!("unexpected {other:?}"),
        }
        match &stmts[9] {
            Statement::CreateFeed { udf, .. } => assert_eq!(udf.as_ref().unwrap().to_string(), "failEvery(3)"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn syntax_errors_carry_position() {
        let err = parse_statement("connect feed F\n  to datset D;").unwrap_err();
        assert_eq!(err, DdlError::Syntax { line: 2, column: 6, message: "expected `dataset`, found `datset`".into() });
        let err = parse_statement("connect feed F to dataset D").unwrap_err();
        assert!(matches!(err, DdlError::Syntax { line: 1, column: 28, .. }), "{err:?}");
    }

    #[test]
    fn unknown_statement_form() {
        let err = parse_statement("drop feed F;").unwrap_err();
        assert!(matches!(err, DdlError::UnknownStatement { line: 1, column: 1, .. }));
        let err = parse_statement("create view V;").unwrap_err();
        assert!(matches!(err, DdlError::UnknownStatement { column: 8, .. }));
    }

    #[test]
    fn parse_statement_requires_exactly_one() {
        assert!(parse_statement("show catalog; show pipelines;").is_err());
        assert_eq!(parse_script("// nothing\n").unwrap(), vec![]);
    }
}
