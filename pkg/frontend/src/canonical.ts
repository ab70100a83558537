/**
 * Deterministic JSON: keys sorted at every nesting level, compact separators,
 * non-ASCII characters kept raw. This matches the coordinator's canonical
 * encoding byte for byte for the values that cross the wire (strings,
 * booleans, null, integers and arrays/objects of those), so content hashes
 * computed here agree with the server's.
 *
 * Number caveat: text formatting of exotic floats follows the host JSON
 * (e.g. `-0` and `1e-7` here versus `-0.0` and `1e-07` on the Python side).
 * Wire traffic and task definitions carry only integers and strings, where
 * both sides agree.
 */

export function canonicalJson(value: unknown): string {
  return stringify(value, '$');
}

function stringify(value: unknown, path: string): string {
  if (value === null || value === undefined) return 'null';
  switch (typeof value) {
    case 'boolean':
      return value ? 'true' : 'false';
    case 'number':
      if (!Number.isFinite(value)) throw new Error(`non-finite number at ${path}`);
      return JSON.stringify(value);
    case 'string':
      return JSON.stringify(value);
    case 'object': {
      if (Array.isArray(value)) {
        const items = value.map((v, i) => stringify(v, `${path}[${i}]`));
        return `[${items.join(',')}]`;
      }
      const entries = Object.entries(value as Record<string, unknown>)
        .filter(([, v]) => v !== undefined)
        .sort(([a], [b]) => compareCodePoints(a, b));
      const fields = entries.map(([k, v]) => `${JSON.stringify(k)}:${stringify(v, `${path}.${k}`)}`);
      return `{${fields.join(',')}}`;
    }
    default:
      throw new Error(`unrepresentable value at ${path}: ${typeof value}`);
  }
}

/**
 * Compare by Unicode code points, not UTF-16 code units. The two orders
 * disagree when one key contains an astral character (a surrogate pair) and
 * another a BMP character above U+DFFF; the hash contract sorts by code
 * point.
 */
export function compareCodePoints(a: string, b: string): number {
  let i = 0;
  let j = 0;
  while (i < a.length && j < b.length) {
    const ca = a.codePointAt(i)!;
    const cb = b.codePointAt(j)!;
    if (ca !== cb) return ca < cb ? -1 : 1;
    i += ca > 0xffff ? 2 : 1;
    j += cb > 0xffff ? 2 : 1;
  }
  const ra = a.length - i;
  const rb = b.length - j;
  return ra === rb ? 0 : ra < rb ? -1 : 1;
}
