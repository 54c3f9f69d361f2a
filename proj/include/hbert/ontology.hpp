#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace hbert {

enum class SystemId { kDiagnosis, kPrescription };

const char* system_name(SystemId id);

struct CodeSystem {
    SystemId id = SystemId::kDiagnosis;
    std::string root_token;
    std::size_t max_depth = 1;  // count of retained tokens, root included
};

// A validated code hierarchy: single root, acyclic, fully connected.
// File format: one `child<TAB>parent` pair per line, `#` starts a comment,
// and the root is the unique line whose parent is `ROOT-SENTINEL`.
class HierarchyTree {
public:
    static constexpr const char* kRootSentinel = "ROOT-SENTINEL";

    static HierarchyTree parse(std::istream& source, CodeSystem system);
    static HierarchyTree parse_file(const std::string& path, CodeSystem system);

    const CodeSystem& system() const { return system_; }
    const std::string& root() const { return root_; }
    std::size_t size() const { return depth_.size(); }

    bool contains(const std::string& token) const { return depth_.count(token) != 0; }
    // nullptr for the root.
    const std::string* parent_of(const std::string& token) const;
    // Depth of the root is 1.
    std::size_t depth_of(const std::string& token) const;
    // All tokens with depth <= max_depth, lexicographically sorted.
    std::vector<std::string> tokens_up_to_depth(std::size_t max_depth) const;
    // Tokens at exactly the given depth, sorted. Depth 2 holds the chapters.
    std::vector<std::string> tokens_at_depth(std::size_t depth) const;

private:
    CodeSystem system_;
    std::string root_;
    std::map<std::string, std::string> parent_;
    std::map<std::string, std::size_t> depth_;
};

// Root-to-code token chain for one medical code.
struct SemanticPath {
    std::string code;
    std::vector<std::string> tokens;  // tokens.front() is the system root
};

// Full expansion of `code` into its ancestor chain, untruncated.
SemanticPath decompose(const std::string& code, const HierarchyTree& tree);

// Keeps the first min(max_depth, length) tokens from the root side.
SemanticPath truncate(SemanticPath path, std::size_t max_depth);

// Token/id bijection with reserved specials.
class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kMask = 1;
    static constexpr int kUnk = 2;
    static constexpr std::size_t kNumSpecials = 3;

    // Specials plus every token whose depth is within its system's max_depth,
    // ids assigned in lexicographic token order.
    static Vocabulary build(const std::vector<const HierarchyTree*>& trees);

    std::size_t size() const { return id_to_token_.size(); }
    bool is_special(int id) const { return id >= 0 && id < static_cast<int>(kNumSpecials); }
    // kUnk for tokens outside the vocabulary.
    int id_of(const std::string& token) const;
    const std::string& token_of(int id) const;

    void export_tsv(std::ostream& out) const;
    std::uint64_t content_hash() const;

private:
    std::map<std::string, int> token_to_id_;
    std::vector<std::string> id_to_token_;
};

enum class TokenMode { kDecomposed, kLeafOnly };

struct CodeRef {
    SystemId system;
    std::string code;
};

// Model input for one visit: token ids in canonical order plus the subgraph
// edges. Edges are local indices, each undirected parent-child pair stored
// once, followed by one self-loop per token. kLeafOnly emits no edges.
struct VisitTokens {
    std::vector<int> ids;
    std::vector<std::pair<int, int>> edges;
};

VisitTokens visit_token_set(const std::vector<CodeRef>& codes, const HierarchyTree& dx_tree,
                            const HierarchyTree& rx_tree, const Vocabulary& vocab,
                            TokenMode mode);

}  // namespace hbert
