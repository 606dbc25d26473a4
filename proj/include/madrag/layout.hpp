#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace madrag {

using TokenId = int;

// Placeholder carried by image positions in a token stream.
inline constexpr TokenId kImageSlot = -1;

enum class SegmentKind {
  Instruction,
  Image,
  ImageQuestion,
  Context,
  ContextQuestion,
  Question,
  Generated,
};

// Input variants compared throughout the toolkit.
//   ClosedBook        [I, Q]
//   VanillaRAG        [I, Q, C]
//   SwapQC            [I, C, Q]
//   DualQuestionNoInt [I, Q_I, C, Q_C]  (no attention mixing)
//   MADRAG            [I, Q_I, C, Q_C]  (attention mixing on Q_C rows)
enum class Variant { ClosedBook, VanillaRAG, SwapQC, DualQuestionNoInt, MADRAG };

std::string_view to_string(SegmentKind kind);
std::string_view to_string(Variant variant);
// Accepts the display names above and the CLI aliases
// closedbook, rag, swap, dualq, madrag.
Variant parse_variant(std::string_view name);
bool is_dual_question(Variant variant);

struct Segment {
  SegmentKind kind;
  std::size_t start;
  std::size_t length;
  std::size_t end() const { return start + length; }
};

class SequenceLayout {
 public:
  SequenceLayout(Variant variant, std::vector<Segment> segments);

  Variant variant() const noexcept { return variant_; }
  const std::vector<Segment>& segments() const noexcept { return segments_; }
  std::size_t length() const noexcept { return length_; }

  // First segment of the given kind, if any.
  std::optional<Segment> find(SegmentKind kind) const;
  Segment require(SegmentKind kind) const;
  // Length of `kind`, zero when absent.
  std::size_t count(SegmentKind kind) const;
  SegmentKind kind_at(std::size_t position) const;

  // Length of the layout without the Generated segment.
  std::size_t prompt_length() const;
  // Copy with a Generated segment of `n` tokens appended (or extended).
  SequenceLayout with_generated(std::size_t n) const;

 private:
  Variant variant_;
  std::vector<Segment> segments_;
  std::size_t length_ = 0;
};

struct LayoutSizes {
  std::size_t image = 0;        // V
  std::size_t question = 1;     // T
  std::size_t context = 0;      // Cn
  std::size_t instruction = 0;  // S
};

// Throws LayoutError on Cn > 0 with ClosedBook, Cn == 0 for a context variant,
// T == 0, or a total length above `max_seq` (when non-zero).
SequenceLayout build_layout(Variant variant, const LayoutSizes& sizes,
                            std::size_t max_seq = 0);

struct SegmentTokens {
  std::vector<TokenId> instruction;
  std::vector<TokenId> question;
  std::vector<TokenId> context;
};

// Full-length token stream for a layout; image positions hold kImageSlot.
// Question tokens fill every question-type segment.
std::vector<TokenId> assemble_tokens(const SequenceLayout& layout, const SegmentTokens& tokens);

// Dual-question stream: Q_I and Q_C both carry `question_tokens`.
// Throws LayoutError for a non-dual variant.
std::vector<TokenId> duplicate_question(const SequenceLayout& layout,
                                        const SegmentTokens& tokens);

std::vector<TokenId> extract_segment(std::span<const TokenId> stream, const Segment& segment);

// Prompt templates rendered in text mode.
enum class DatasetStyle { OkVqa, EvqaInfoseek };
enum class PromptMode { ClosedBook, Rag };

// Raw template text with {question} / {context} placeholders. Version "v1"
// is mirrored byte-for-byte by data/prompts/v1/*.txt.
std::string_view prompt_template(DatasetStyle style, PromptMode mode);
std::string prompt_fixture_name(DatasetStyle style, PromptMode mode);

// Throws ConfigError on an empty question, a missing context in Rag mode, or
// a context supplied in ClosedBook mode.
std::string render_prompt(DatasetStyle style, PromptMode mode, std::string_view question,
                          std::string_view context = {});

}  // namespace madrag
