namespace FW {
namespace detail {

[[nodiscard]] inline int clampIndex(int i, // @start:clamp
                                    int n) noexcept {
    if (i < 0) {
        return 0;
    }
    return i >= n ? n - 1 : i; // @query:clamp
} // @end:clamp

} // namespace detail

auto makeTable(int n) -> std::vector<int> { // @start:table
    std::vector<int> t(n);
    for (int i = 0; i < n; ++i) {
        t[i] = detail::clampIndex(i * 2, n); // @query:table
    }
    return t;
} // @end:table

} // namespace FW
