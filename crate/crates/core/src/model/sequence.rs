use std::ops::Range;

/// Role of a position in the mixed sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Segment {
    Visual,
    Text,
    Query,
    Answer,
}

/// What feeds a position: a row of the visual stream, a vocabulary id, or a
/// row of the query set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Visual(usize),
    Text(u32),
    Query(usize),
    Answer(u32),
}

impl Token {
    pub fn segment(self) -> Segment {
        match self {
            Token::Visual(_) => Segment::Visual,
            Token::Text(_) => Segment::Text,
            Token::Query(_) => Segment::Query,
            Token::Answer(_) => Segment::Answer,
        }
    }
}

/// A contiguous run of one segment. `turn` is `None` for the visual prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Span {
    pub segment: Segment,
    pub turn: Option<usize>,
    pub range: Range<usize>,
}

/// One instruction and its (possibly empty) answer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Turn {
    pub text: Vec<u32>,
    pub answer: Vec<u32>,
}

impl Turn {
    pub fn new(text: Vec<u32>, answer: Vec<u32>) -> Self {
        Turn { text, answer }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedSequence {
    tokens: Vec<Token>,
    spans: Vec<Span>,
}

/// Lays out `visual ‖ (text ‖ query ‖ answer)` with one block per turn.
/// Empty segments produce no span.
pub fn build_sequence(n_visual: usize, turns: &[Turn], n_queries: usize) -> MixedSequence {
    let mut seq = MixedSequence {
        tokens: Vec::new(),
        spans: Vec::new(),
    };
    seq.extend(None, (0..n_visual).map(Token::Visual));
    for (t, turn) in turns.iter().enumerate() {
        seq.extend(Some(t), turn.text.iter().map(|&id| Token::Text(id)));
        seq.extend(Some(t), (0..n_queries).map(Token::Query));
        seq.extend(Some(t), turn.answer.iter().map(|&id| Token::Answer(id)));
    }
    seq
}

impl MixedSequence {
    fn extend(&mut self, turn: Option<usize>, tokens: impl Iterator<Item = Token>) {
        let start = self.tokens.len();
        self.tokens.extend(tokens);
        if let Some(first) = self.tokens.get(start) {
            self.spans.push(Span {
                segment: first.segment(),
                turn,
                range: start..self.tokens.len(),
            });
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn count(&self, segment: Segment) -> usize {
        self.tokens
            .iter()
            .filter(|t| t.segment() == segment)
            .count()
    }

    pub fn n_turns(&self) -> usize {
        self.spans
            .iter()
            .filter_map(|s| s.turn)
            .max()
            .map_or(0, |t| t + 1)
    }

    /// Range of `segment` within `turn`, if present.
    pub fn span_of(&self, turn: usize, segment: Segment) -> Option<Range<usize>> {
        self.spans
            .iter()
            .find(|s| s.turn == Some(turn) && s.segment == segment)
            .map(|s| s.range.clone())
    }

    pub fn query_positions(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&p| self.tokens[p].segment() == Segment::Query)
            .collect()
    }

    /// `(position, target)` pairs for next-token prediction of every answer
    /// token: the logit row one before each answer position.
    pub fn answer_targets(&self) -> Vec<(usize, usize)> {
        self.tokens
            .iter()
            .enumerate()
            .filter_map(|(p, t)| match *t {
                Token::Answer(id) if p > 0 => Some((p - 1, id as usize)),
                _ => None,
            })
            .collect()
    }

    /// Appends a generated answer token to the last turn.
    pub fn push_answer(&mut self, id: u32) {
        let turn = self.spans.last().and_then(|s| s.turn);
        let pos = self.tokens.len();
        self.tokens.push(Token::Answer(id));
        match self.spans.last_mut() {
            Some(s) if s.segment == Segment::Answer => s.range.end = pos + 1,
            _ => self.spans.push(Span {
                segment: Segment::Answer,
                turn,
                range: pos..pos + 1,
            }),
        }
    }

    /// The same sequence with `tokens[pos]` replaced.
    pub fn with_token(&self, pos: usize, token: Token) -> MixedSequence {
        let mut out = self.clone();
        out.tokens[pos] = token;
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_prefill_length() {
        let seq = build_sequence(81, &[Turn::new(vec![7; 20], vec![])], 9);
        assert_eq!(seq.len(), 110);
        let kinds: Vec<Segment> = seq.spans().iter().map(|s| s.segment).collect();
        assert_eq!(kinds, [Segment::Visual, Segment::Text, Segment::Query]);
        assert_eq!(seq.span_of(0, Segment::Query), Some(101..110));
    }

    #[test]
    fn no_queries_gives_visual_and_text_only() {
        let seq = build_sequence(4, &[Turn::new(vec![1, 2], vec![])], 0);
        assert_eq!(seq.len(), 6);
        assert_eq!(seq.count(Segment::Query), 0);
    }

    #[test]
    fn two_turns_have_one_query_block_each() {
        let turns = [
            Turn::new(vec![1, 2, 3], vec![4, 5]),
            Turn::new(vec![6], vec![7]),
        ];
        let seq = build_sequence(81, &turns, 9);
        assert_eq!(seq.query_positions().len(), 18);
        assert_eq!(seq.n_turns(), 2);
        // Text of turn 1 follows the answer of turn 0.
        let a0 = seq.span_of(0, Segment::Answer).unwrap();
        assert_eq!(seq.span_of(1, Segment::Text).unwrap().start, a0.end);
    }

    #[test]
    fn answer_targets_are_shifted_by_one() {
        let seq = build_sequence(2, &[Turn::new(vec![9], vec![3, 4])], 1);
        // positions: V V T Q A A
        assert_eq!(seq.answer_targets(), vec![(3, 3), (4, 4)]);
    }

    #[test]
    fn push_answer_extends_or_opens_a_span() {
        let mut seq = build_sequence(1, &[Turn::new(vec![5], vec![])], 2);
        seq.push_answer(8);
        seq.push_answer(9);
        assert_eq!(seq.span_of(0, Segment::Answer), Some(4..6));
        assert_eq!(seq.spans().len(), 4);
    }
}
