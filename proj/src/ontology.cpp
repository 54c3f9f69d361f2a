#include "hbert/ontology.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "hbert/errors.hpp"
#include "hbert/rng.hpp"

namespace hbert {

const char* system_name(SystemId id) {
    return id == SystemId::kDiagnosis ? "diagnosis" : "prescription";
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

}  // namespace

HierarchyTree HierarchyTree::parse(std::istream& source, CodeSystem system) {
    if (system.max_depth < 1) {
        throw DataError("hierarchy: max_depth must be >= 1");
    }
    HierarchyTree tree;
    tree.system_ = std::move(system);

    std::string line;
    std::size_t line_no = 0;
    std::vector<std::string> roots;
    while (std::getline(source, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos) {
            throw DataError("hierarchy line " + std::to_string(line_no) +
                            ": expected child<TAB>parent");
        }
        const std::string child = trim(line.substr(0, tab));
        const std::string parent = trim(line.substr(tab + 1));
        if (child.empty() || parent.empty()) {
            throw DataError("hierarchy line " + std::to_string(line_no) + ": empty token");
        }
        if (child == kRootSentinel) {
            throw DataError("hierarchy line " + std::to_string(line_no) +
                            ": reserved token used as child");
        }
        if (tree.parent_.count(child)) {
            throw DuplicateChildLine("hierarchy line " + std::to_string(line_no) + ": token '" +
                                     child + "' defined twice");
        }
        tree.parent_[child] = parent;
        if (parent == kRootSentinel) roots.push_back(child);
    }
    if (roots.size() > 1) {
        throw MultipleRoots("hierarchy: tokens '" + roots[0] + "' and '" + roots[1] +
                            "' both declared as roots");
    }
    if (!roots.empty()) tree.root_ = roots[0];

    // Every parent must itself be defined (or be the sentinel).
    for (const auto& [child, parent] : tree.parent_) {
        if (parent != kRootSentinel && !tree.parent_.count(parent)) {
            throw OrphanToken("hierarchy: parent '" + parent + "' of '" + child +
                              "' is never defined");
        }
    }
    if (roots.empty()) {
        // All parents defined and no root line: some chain must loop.
        throw CycleDetected("hierarchy: no root declared and the parent graph cycles");
    }

    // Depth assignment doubles as cycle detection.
    for (const auto& [token, parent] : tree.parent_) {
        if (tree.depth_.count(token)) continue;
        std::vector<std::string> chain;
        std::set<std::string> on_chain;
        std::string cur = token;
        while (!tree.depth_.count(cur)) {
            if (!on_chain.insert(cur).second) {
                throw CycleDetected("hierarchy: cycle through token '" + cur + "'");
            }
            chain.push_back(cur);
            const std::string& p = tree.parent_.at(cur);
            if (p == kRootSentinel) {
                tree.depth_[cur] = 1;
                chain.pop_back();
                break;
            }
            cur = p;
        }
        std::size_t base = chain.empty() ? 0 : tree.depth_.at(tree.parent_.at(chain.back()));
        for (auto it = chain.rbegin(); it != chain.rend(); ++it) {
            tree.depth_[*it] = ++base;
        }
    }
    if (tree.system_.root_token.empty()) {
        tree.system_.root_token = tree.root_;
    } else if (tree.root_ != tree.system_.root_token) {
        throw DataError("hierarchy: root token '" + tree.root_ + "' does not match configured '" +
                        tree.system_.root_token + "'");
    }
    return tree;
}

HierarchyTree HierarchyTree::parse_file(const std::string& path, CodeSystem system) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open hierarchy file: " + path);
    return parse(in, std::move(system));
}

const std::string* HierarchyTree::parent_of(const std::string& token) const {
    auto it = parent_.find(token);
    if (it == parent_.end() || it->second == kRootSentinel) return nullptr;
    return &it->second;
}

std::size_t HierarchyTree::depth_of(const std::string& token) const {
    auto it = depth_.find(token);
    if (it == depth_.end()) throw UnknownCode("unknown token: " + token);
    return it->second;
}

std::vector<std::string> HierarchyTree::tokens_up_to_depth(std::size_t max_depth) const {
    std::vector<std::string> out;
    for (const auto& [token, depth] : depth_) {
        if (depth <= max_depth) out.push_back(token);
    }
    return out;  // std::map iteration is already sorted
}

std::vector<std::string> HierarchyTree::tokens_at_depth(std::size_t depth) const {
    std::vector<std::string> out;
    for (const auto& [token, d] : depth_) {
        if (d == depth) out.push_back(token);
    }
    return out;
}

SemanticPath decompose(const std::string& code, const HierarchyTree& tree) {
    if (!tree.contains(code)) throw UnknownCode("unknown code: " + code);
    SemanticPath path;
    path.code = code;
    std::string cur = code;
    path.tokens.push_back(cur);
    while (const std::string* parent = tree.parent_of(cur)) {
        cur = *parent;
        path.tokens.push_back(cur);
    }
    std::reverse(path.tokens.begin(), path.tokens.end());
    return path;
}

SemanticPath truncate(SemanticPath path, std::size_t max_depth) {
    if (max_depth < 1) throw DataError("truncate: max_depth must be >= 1");
    if (path.tokens.size() > max_depth) path.tokens.resize(max_depth);
    return path;
}

Vocabulary Vocabulary::build(const std::vector<const HierarchyTree*>& trees) {
    std::set<std::string> tokens;
    for (const HierarchyTree* tree : trees) {
        for (auto& token : tree->tokens_up_to_depth(tree->system().max_depth)) {
            tokens.insert(std::move(token));
        }
    }
    Vocabulary vocab;
    vocab.id_to_token_ = {"[PAD]", "[MASK]", "[UNK]"};
    for (const auto& token : tokens) {
        vocab.token_to_id_[token] = static_cast<int>(vocab.id_to_token_.size());
        vocab.id_to_token_.push_back(token);
    }
    return vocab;
}

int Vocabulary::id_of(const std::string& token) const {
    auto it = token_to_id_.find(token);
    return it == token_to_id_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token_of(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= id_to_token_.size()) {
        throw IdOutOfRange("vocabulary: id " + std::to_string(id));
    }
    return id_to_token_[id];
}

void Vocabulary::export_tsv(std::ostream& out) const {
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
        out << id_to_token_[id] << '\t' << id << '\n';
    }
}

std::uint64_t Vocabulary::content_hash() const {
    std::ostringstream os;
    export_tsv(os);
    return fnv1a(os.str());
}

VisitTokens visit_token_set(const std::vector<CodeRef>& codes, const HierarchyTree& dx_tree,
                            const HierarchyTree& rx_tree, const Vocabulary& vocab,
                            TokenMode mode) {
    if (codes.empty()) throw EmptyVisit("visit_token_set: no codes");

    // Canonical ordering: diagnosis tokens, then prescription tokens, each
    // lexicographic; a single trailing [UNK] slot if any code is unknown.
    std::set<std::string> dx_tokens, rx_tokens;
    std::set<std::pair<std::string, std::string>> tree_edges;  // parent -> child
    bool has_unknown = false;

    for (const CodeRef& ref : codes) {
        const HierarchyTree& tree = ref.system == SystemId::kDiagnosis ? dx_tree : rx_tree;
        auto& bucket = ref.system == SystemId::kDiagnosis ? dx_tokens : rx_tokens;
        if (!tree.contains(ref.code)) {
            has_unknown = true;
            continue;
        }
        SemanticPath path = truncate(decompose(ref.code, tree), tree.system().max_depth);
        if (mode == TokenMode::kLeafOnly) {
            bucket.insert(path.tokens.back());
        } else {
            for (std::size_t i = 0; i < path.tokens.size(); ++i) {
                bucket.insert(path.tokens[i]);
                if (i + 1 < path.tokens.size()) {
                    tree_edges.emplace(path.tokens[i], path.tokens[i + 1]);
                }
            }
        }
    }

    VisitTokens out;
    std::map<std::string, int> local;  // token -> position, per system bucket
    for (const auto* bucket : {&dx_tokens, &rx_tokens}) {
        for (const auto& token : *bucket) {
            local[token] = static_cast<int>(out.ids.size());
            out.ids.push_back(vocab.id_of(token));
        }
    }
    if (has_unknown) out.ids.push_back(Vocabulary::kUnk);

    if (mode == TokenMode::kDecomposed) {
        for (const auto& [parent, child] : tree_edges) {
            out.edges.emplace_back(local.at(parent), local.at(child));
        }
        for (int i = 0; i < static_cast<int>(out.ids.size()); ++i) {
            out.edges.emplace_back(i, i);
        }
    }
    return out;
}

}  // namespace hbert
