import { describe, expect, it } from 'vitest';

import { canonicalJson, compareCodePoints } from '../src/canonical';

// Expected strings in this file were produced by the coordinator's encoder;
// the two implementations must agree byte for byte.
describe('canonicalJson', () => {
  it('sorts keys recursively with compact separators', () => {
    const value = { b: 1, a: { d: 2, c: [3, { z: 0, y: true }] } };
    expect(canonicalJson(value)).toBe('{"a":{"c":[3,{"y":true,"z":0}],"d":2},"b":1}');
  });

  it('keeps non-ASCII raw and escapes controls the same way', () => {
    const value = { s: 'a"b\\c\nd\tef héllo→世界' };
    expect(canonicalJson(value)).toBe(
      '{"s":"a\\"b\\\\c\\nd\\te\\u0001f héllo→世界"}',
    );
  });

  it('orders keys by code point, not UTF-16 code unit', () => {
    // U+E000 is a single code unit above the surrogate range; U+10000 is a
    // surrogate pair whose first unit is below it. Code-point order puts
    // U+E000 first.
    const value = { '': 1, '\u{10000}': 2, zz: 3 };
    expect(canonicalJson(value)).toBe('{"zz":3,"":1,"\u{10000}":2}');
  });

  it('formats integers and plain decimals like the coordinator', () => {
    expect(canonicalJson({ a: 3, b: 0.5, c: -17, d: 1e21 })).toBe(
      '{"a":3,"b":0.5,"c":-17,"d":1e+21}',
    );
  });

  it('rejects non-finite numbers', () => {
    expect(() => canonicalJson({ x: NaN })).toThrow(/non-finite number at \$\.x/);
    expect(() => canonicalJson([Infinity])).toThrow(/non-finite number at \$\[0\]/);
  });

  it('omits undefined object fields and nullifies undefined array slots', () => {
    expect(canonicalJson({ a: undefined, b: 1 })).toBe('{"b":1}');
    expect(canonicalJson([undefined, 1])).toBe('[null,1]');
  });

  it('serializes null, booleans and empty containers', () => {
    expect(canonicalJson(null)).toBe('null');
    expect(canonicalJson({ t: true, f: false, n: null })).toBe('{"f":false,"n":null,"t":true}');
    expect(canonicalJson({})).toBe('{}');
    expect(canonicalJson([])).toBe('[]');
  });

  it('rejects functions and other unrepresentable values', () => {
    expect(() => canonicalJson({ f: () => 0 })).toThrow(/unrepresentable value at \$\.f/);
  });
});

describe('compareCodePoints', () => {
  it('matches lexicographic code-point order', () => {
    expect(compareCodePoints('a', 'b')).toBeLessThan(0);
    expect(compareCodePoints('b', 'a')).toBeGreaterThan(0);
    expect(compareCodePoints('abc', 'abc')).toBe(0);
    expect(compareCodePoints('ab', 'abc')).toBeLessThan(0);
    expect(compareCodePoints('', '\u{10000}')).toBeLessThan(0);
    expect(compareCodePoints('\u{10000}', '\u{10001}')).toBeLessThan(0);
  });
});
