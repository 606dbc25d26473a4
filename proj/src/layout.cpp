#include "madrag/layout.hpp"

#include <algorithm>

#include "madrag/error.hpp"

namespace madrag {

std::string_view to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::Instruction: return "instruction";
    case SegmentKind::Image: return "image";
    case SegmentKind::ImageQuestion: return "image_question";
    case SegmentKind::Context: return "context";
    case SegmentKind::ContextQuestion: return "context_question";
    case SegmentKind::Question: return "question";
    case SegmentKind::Generated: return "generated";
  }
  return "unknown";
}

std::string_view to_string(Variant variant) {
  switch (variant) {
    case Variant::ClosedBook: return "ClosedBook";
    case Variant::VanillaRAG: return "VanillaRAG";
    case Variant::SwapQC: return "SwapQC";
    case Variant::DualQuestionNoInt: return "DualQuestionNoInt";
    case Variant::MADRAG: return "MADRAG";
  }
  return "unknown";
}

Variant parse_variant(std::string_view name) {
  if (name == "ClosedBook" || name == "closedbook") return Variant::ClosedBook;
  if (name == "VanillaRAG" || name == "rag") return Variant::VanillaRAG;
  if (name == "SwapQC" || name == "swap") return Variant::SwapQC;
  if (name == "DualQuestionNoInt" || name == "dualq") return Variant::DualQuestionNoInt;
  if (name == "MADRAG" || name == "madrag") return Variant::MADRAG;
  throw ConfigError("unknown variant '" + std::string(name) + "'");
}

bool is_dual_question(Variant variant) {
  return variant == Variant::DualQuestionNoInt || variant == Variant::MADRAG;
}

SequenceLayout::SequenceLayout(Variant variant, std::vector<Segment> segments)
    : variant_(variant), segments_(std::move(segments)) {
  std::size_t cursor = 0;
  for (const auto& s : segments_) {
    if (s.start != cursor) {
      throw LayoutError("segments must be contiguous: " + std::string(to_string(s.kind)) +
                        " starts at " + std::to_string(s.start) + ", expected " +
                        std::to_string(cursor));
    }
    cursor = s.end();
  }
  length_ = cursor;
}

std::optional<Segment> SequenceLayout::find(SegmentKind kind) const {
  for (const auto& s : segments_)
    if (s.kind == kind) return s;
  return std::nullopt;
}

Segment SequenceLayout::require(SegmentKind kind) const {
  auto s = find(kind);
  if (!s) {
    throw LayoutError(std::string(to_string(variant_)) + " layout has no " +
                      std::string(to_string(kind)) + " segment");
  }
  return *s;
}

std::size_t SequenceLayout::count(SegmentKind kind) const {
  std::size_t n = 0;
  for (const auto& s : segments_)
    if (s.kind == kind) n += s.length;
  return n;
}

SegmentKind SequenceLayout::kind_at(std::size_t position) const {
  for (const auto& s : segments_)
    if (position >= s.start && position < s.end()) return s.kind;
  throw LayoutError("position " + std::to_string(position) + " outside layout of length " +
                    std::to_string(length_));
}

std::size_t SequenceLayout::prompt_length() const {
  return length_ - count(SegmentKind::Generated);
}

SequenceLayout SequenceLayout::with_generated(std::size_t n) const {
  std::vector<Segment> segs = segments_;
  if (!segs.empty() && segs.back().kind == SegmentKind::Generated) {
    segs.back().length += n;
  } else {
    segs.push_back({SegmentKind::Generated, length_, n});
  }
  return SequenceLayout(variant_, std::move(segs));
}

SequenceLayout build_layout(Variant variant, const LayoutSizes& sizes, std::size_t max_seq) {
  if (sizes.question == 0) throw LayoutError("question must have at least one token");
  if (variant == Variant::ClosedBook && sizes.context > 0) {
    throw LayoutError("ClosedBook layout cannot carry " + std::to_string(sizes.context) +
                      " context tokens");
  }
  if (variant != Variant::ClosedBook && sizes.context == 0) {
    throw LayoutError(std::string(to_string(variant)) + " layout requires a context segment");
  }

  std::vector<Segment> segs;
  std::size_t cursor = 0;
  auto push = [&](SegmentKind kind, std::size_t len) {
    if (len == 0 && kind != SegmentKind::Image) return;
    segs.push_back({kind, cursor, len});
    cursor += len;
  };
  push(SegmentKind::Instruction, sizes.instruction);
  push(SegmentKind::Image, sizes.image);
  switch (variant) {
    case Variant::ClosedBook:
      push(SegmentKind::Question, sizes.question);
      break;
    case Variant::VanillaRAG:
      push(SegmentKind::Question, sizes.question);
      push(SegmentKind::Context, sizes.context);
      break;
    case Variant::SwapQC:
      push(SegmentKind::Context, sizes.context);
      push(SegmentKind::Question, sizes.question);
      break;
    case Variant::DualQuestionNoInt:
    case Variant::MADRAG:
      push(SegmentKind::ImageQuestion, sizes.question);
      push(SegmentKind::Context, sizes.context);
      push(SegmentKind::ContextQuestion, sizes.question);
      break;
  }
  if (max_seq != 0 && cursor > max_seq) {
    throw LayoutError("layout length " + std::to_string(cursor) + " exceeds max_seq " +
                      std::to_string(max_seq));
  }
  return SequenceLayout(variant, std::move(segs));
}

namespace {

void fill(std::vector<TokenId>& stream, const Segment& seg, const std::vector<TokenId>& src,
          std::string_view what) {
  if (src.size() != seg.length) {
    throw LayoutError(std::string(what) + ": layout expects " + std::to_string(seg.length) +
                      " tokens, got " + std::to_string(src.size()));
  }
  std::copy(src.begin(), src.end(), stream.begin() + static_cast<std::ptrdiff_t>(seg.start));
}

}  // namespace

std::vector<TokenId> assemble_tokens(const SequenceLayout& layout, const SegmentTokens& tokens) {
  std::vector<TokenId> stream(layout.length(), kImageSlot);
  for (const auto& seg : layout.segments()) {
    switch (seg.kind) {
      case SegmentKind::Image:
      case SegmentKind::Generated:
        break;
      case SegmentKind::Instruction:
        fill(stream, seg, tokens.instruction, "instruction");
        break;
      case SegmentKind::Question:
      case SegmentKind::ImageQuestion:
      case SegmentKind::ContextQuestion:
        fill(stream, seg, tokens.question, "question");
        break;
      case SegmentKind::Context:
        fill(stream, seg, tokens.context, "context");
        break;
    }
  }
  return stream;
}

std::vector<TokenId> duplicate_question(const SequenceLayout& layout,
                                        const SegmentTokens& tokens) {
  if (!is_dual_question(layout.variant())) {
    throw LayoutError("duplicate_question requires a dual-question layout, got " +
                      std::string(to_string(layout.variant())));
  }
  return assemble_tokens(layout, tokens);
}

std::vector<TokenId> extract_segment(std::span<const TokenId> stream, const Segment& segment) {
  if (segment.end() > stream.size()) throw LayoutError("segment extends past token stream");
  auto sub = stream.subspan(segment.start, segment.length);
  return {sub.begin(), sub.end()};
}

// Templates; line breaks are significant and there is no trailing newline.
namespace {

constexpr std::string_view kOkVqaClosedBook =
    "{question}\n"
    "Answer using a single word or phrase.";

constexpr std::string_view kEvqaClosedBook =
    "Answer the question based on the image.\n"
    "Question: {question}\n"
    "Do not generate anything but the short answer.\n"
    "Short answer:";

constexpr std::string_view kOkVqaRag =
    "{question}\n"
    "Context:\n"
    "{context}\n"
    "Answer using a single word or phrase.";

constexpr std::string_view kEvqaRag =
    "Given the context, answer the question based on the image.\n"
    "Question: {question}\n"
    "Context:\n"
    "{context}\n"
    "If the context does not help with the question, try to answer it anyway. "
    "Do not generate anything but the short answer.\n"
    "Short answer:";

// Single left-to-right pass so placeholder-like text inside values is kept.
std::string substitute(std::string_view tmpl, std::string_view question,
                       std::string_view context) {
  constexpr std::string_view kQuestion = "{question}";
  constexpr std::string_view kContext = "{context}";
  std::string out;
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl.substr(i, kQuestion.size()) == kQuestion) {
      out += question;
      i += kQuestion.size();
    } else if (tmpl.substr(i, kContext.size()) == kContext) {
      out += context;
      i += kContext.size();
    } else {
      out += tmpl[i++];
    }
  }
  return out;
}

}  // namespace

std::string_view prompt_template(DatasetStyle style, PromptMode mode) {
  if (style == DatasetStyle::OkVqa)
    return mode == PromptMode::ClosedBook ? kOkVqaClosedBook : kOkVqaRag;
  return mode == PromptMode::ClosedBook ? kEvqaClosedBook : kEvqaRag;
}

std::string prompt_fixture_name(DatasetStyle style, PromptMode mode) {
  std::string name = style == DatasetStyle::OkVqa ? "okvqa" : "evqa_infoseek";
  name += mode == PromptMode::ClosedBook ? "_closed_book.txt" : "_rag.txt";
  return name;
}

std::string render_prompt(DatasetStyle style, PromptMode mode, std::string_view question,
                          std::string_view context) {
  if (question.empty()) throw ConfigError("render_prompt: empty question");
  if (mode == PromptMode::Rag && context.empty()) {
    throw ConfigError("render_prompt: rag mode requires a retrieved context");
  }
  if (mode == PromptMode::ClosedBook && !context.empty()) {
    throw ConfigError("render_prompt: closed-book mode takes no context");
  }
  return substitute(prompt_template(style, mode), question, context);
}

}  // namespace madrag
