/** Real WebSocket adapter for Node tests (browsers use the built-in class). */

import WebSocket from 'ws';

import { SocketFactory } from '../../src/session';

export const nodeSocket: SocketFactory = (url, hooks) => {
  const ws = new WebSocket(url);
  ws.on('open', () => hooks.onOpen());
  ws.on('message', (data) => hooks.onMessage(data.toString()));
  ws.on('close', (code) => hooks.onClose(`code ${code}`));
  ws.on('error', () => {
    // the close event that follows carries the report
  });
  return {
    send: (data: string) => ws.send(data),
    close: () => ws.close(),
  };
};
