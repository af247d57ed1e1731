#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

namespace krt {

using ClassId = std::uint32_t;

// Sorted, duplicate-free class ids.
using LabelSet = std::vector<ClassId>;

inline void normalize(LabelSet& set) {
    std::sort(set.begin(), set.end());
    set.erase(std::unique(set.begin(), set.end()), set.end());
}

inline bool contains(const LabelSet& set, ClassId id) {
    return std::binary_search(set.begin(), set.end(), id);
}

inline LabelSet set_union(const LabelSet& a, const LabelSet& b) {
    LabelSet out;
    std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

inline LabelSet set_intersection(const LabelSet& a, const LabelSet& b) {
    LabelSet out;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

inline LabelSet set_difference(const LabelSet& a, const LabelSet& b) {
    LabelSet out;
    std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
    return out;
}

}  // namespace krt
